"""Synthetic bitemporal scene generation and dataset plumbing.

Scenes are flat-shaded land-cover objects on a textured terrain canvas. All
stochastic texture is keyed by per-scene and per-object seeds rather than a
shared stream, so two renders of specs that agree outside an edited region
are bit-identical outside that region. That property is what lets the
ground-truth change mask double as a pixel-diff oracle.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from . import prompt as pr
from . import tokenizer as tok
from .tensor import ContractError, DimensionError

CATEGORIES = (
    "non-vegetated surface",
    "trees",
    "low vegetation",
    "water",
    "buildings",
    "playground",
)

# Bare question word per category for the explicit task style.
QUESTION_WORDS = {
    "non-vegetated surface": "Non-vegetated surface",
    "trees": "Trees",
    "low vegetation": "Low vegetation",
    "water": "Water",
    "buildings": "Building",
    "playground": "Playground",
}

_SHAPES = {
    "non-vegetated surface": "rect",
    "trees": "disk",
    "low vegetation": "ellipse",
    "water": "ellipse",
    "buildings": "rect",
    "playground": "ellipse",
}

# Base colors are separated from the terrain color by >= 0.17 in at least one
# channel; uniform texture noise is bounded so object/background pixels can
# never collide even after 8-bit quantization.
_COLORS = {
    "non-vegetated surface": (0.72, 0.68, 0.60),
    "trees": (0.05, 0.35, 0.08),
    "low vegetation": (0.45, 0.72, 0.30),
    "water": (0.15, 0.35, 0.75),
    "buildings": (0.55, 0.20, 0.15),
    "playground": (0.85, 0.45, 0.10),
}
_TERRAIN = (0.35, 0.30, 0.25)
_NOISE_AMP = 0.035
_SHADE_JITTER = 0.03

TASK_TYPES = ("non_reasoning", "implicit", "implicit_with_explanation")

_DIR_VERB = {"appear": "increased", "disappear": "decreased"}


class RetrySignal(Exception):
    """Requested mutation cannot be realized on this scene; draw again."""


@dataclass(frozen=True)
class SceneObject:
    category: str
    shape: str
    x: int
    y: int
    w: int
    h: int
    color: tuple
    texture_seed: int


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int
    noise_key: int
    objects: tuple


@dataclass(frozen=True)
class ChangeEvent:
    category: str
    direction: str
    objects: tuple

    def __post_init__(self):
        if self.direction not in ("appear", "disappear"):
            raise ContractError(f"unknown direction {self.direction!r}")
        if self.category not in CATEGORIES:
            raise ContractError(f"unknown category {self.category!r}")


@dataclass(frozen=True)
class ManifestEntry:
    img1_path: str
    img2_path: str
    mask_path: str
    question: str
    answer: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ManifestEntry":
        obj = json.loads(text)
        want = {"img1_path", "img2_path", "mask_path", "question", "answer"}
        if set(obj) != want:
            raise ContractError(f"manifest fields {sorted(obj)} != {sorted(want)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# geometry and rendering
# ---------------------------------------------------------------------------

def footprint(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean [size, size] pixel membership of one object."""
    fp = np.zeros((size, size), dtype=bool)
    if obj.shape == "rect":
        fp[obj.y:obj.y + obj.h, obj.x:obj.x + obj.w] = True
        return fp
    cy, cx = obj.y + (obj.h - 1) / 2.0, obj.x + (obj.w - 1) / 2.0
    ry, rx = obj.h / 2.0, obj.w / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    fp = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return fp


def _bbox(obj: SceneObject):
    return obj.x, obj.y, obj.x + obj.w, obj.y + obj.h


def _bboxes_clear(obj: SceneObject, others, margin: int = 1) -> bool:
    x0, y0, x1, y1 = _bbox(obj)
    for o in others:
        a0, b0, a1, b1 = _bbox(o)
        if x0 - margin < a1 and a0 - margin < x1 and y0 - margin < b1 and b0 - margin < y1:
            return False
    return True


def _try_place(category: str, size: int, others, rng, attempts: int = 40):
    shape = _SHAPES[category]
    base = np.asarray(_COLORS[category])
    for _ in range(attempts):
        w = int(rng.integers(8, 19))
        h = w if shape == "disk" else int(rng.integers(8, 19))
        x = int(rng.integers(0, size - w + 1))
        y = int(rng.integers(0, size - h + 1))
        shade = rng.uniform(-_SHADE_JITTER, _SHADE_JITTER, 3)
        obj = SceneObject(
            category=category, shape=shape, x=x, y=y, w=w, h=h,
            color=tuple(float(c) for c in np.clip(base + shade, 0.0, 1.0)),
            texture_seed=int(rng.integers(0, 2 ** 31)))
        if _bboxes_clear(obj, others):
            return obj
    return None


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Deterministic float32 [3, size, size] render in [0, 1]."""
    s = spec.size
    bg = np.random.default_rng(spec.noise_key)
    img = np.asarray(_TERRAIN)[:, None, None] + bg.uniform(-_NOISE_AMP, _NOISE_AMP, (3, s, s))
    for obj in spec.objects:
        fp = footprint(obj, s)
        tex = np.random.default_rng(obj.texture_seed).uniform(
            -_NOISE_AMP, _NOISE_AMP, (3, s, s))
        layer = np.asarray(obj.color)[:, None, None] + tex
        img = np.where(fp[None, :, :], layer, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(seed: int, size: int = 64):
    """Procedural T1 scene: placed land-cover objects over noisy terrain."""
    if size < 32:
        raise ContractError(f"canvas size {size} < 32")
    rng = np.random.default_rng(seed)
    noise_key = int(rng.integers(0, 2 ** 31))
    count = int(rng.integers(3, 7))
    objects = []
    while len(objects) < count:
        cat = str(rng.choice(CATEGORIES))
        obj = _try_place(cat, size, objects, rng)
        if obj is None:
            break
        objects.append(obj)
    if not objects:
        raise ContractError("placement failed for every object")
    spec = SceneSpec(seed=seed, size=size, noise_key=noise_key,
                     objects=tuple(objects))
    return spec, render_scene(spec)


def mutate_scene(spec: SceneSpec, event):
    """Apply one change event; returns (new spec, boolean change mask).

    A null event returns the identical spec with an empty mask. Disappear
    events must reference objects present in the scene; appear events must
    fit without touching existing footprints. Violations raise RetrySignal
    so a generator loop can redraw.
    """
    s = spec.size
    if event is None:
        return spec, np.zeros((s, s), dtype=bool)
    if event.direction == "disappear":
        for o in event.objects:
            if o not in spec.objects:
                raise RetrySignal("disappear target not in scene")
        remaining = tuple(o for o in spec.objects if o not in event.objects)
    else:
        kept = list(spec.objects)
        for o in event.objects:
            if o.x < 0 or o.y < 0 or o.x + o.w > s or o.y + o.h > s:
                raise RetrySignal("appear target exceeds canvas")
            if not _bboxes_clear(o, kept):
                raise RetrySignal("appear target overlaps existing object")
            kept.append(o)
        remaining = tuple(kept)
    mask = np.zeros((s, s), dtype=bool)
    for o in event.objects:
        mask |= footprint(o, s)
    out = SceneSpec(seed=spec.seed, size=s, noise_key=spec.noise_key,
                    objects=remaining)
    return out, mask


def propose_event(spec: SceneSpec, category: str, direction: str, rng,
                  max_objects: int = 2) -> ChangeEvent:
    """Draw a concrete event of the requested kind, or signal a retry."""
    if direction == "disappear":
        cands = [o for o in spec.objects if o.category == category]
        if not cands:
            raise RetrySignal(f"no {category} present to remove")
        n = int(min(len(cands), rng.integers(1, max_objects + 1)))
        idx = sorted(rng.choice(len(cands), size=n, replace=False).tolist())
        return ChangeEvent(category, "disappear",
                           tuple(cands[i] for i in idx))
    n = int(rng.integers(1, max_objects + 1))
    placed = []
    for _ in range(n):
        obj = _try_place(category, spec.size, list(spec.objects) + placed, rng)
        if obj is not None:
            placed.append(obj)
    if not placed:
        raise RetrySignal(f"no room to add {category}")
    return ChangeEvent(category, "appear", tuple(placed))


# ---------------------------------------------------------------------------
# question/answer templating
# ---------------------------------------------------------------------------

def _t(cat, direction, *phrases):
    return ((cat, direction), tuple(phrases))


IMPLICIT_TEMPLATES = dict([
    _t("buildings", "appear",
       "changes that provide more living areas for people",
       "changes that promote urbanization",
       "changes brought by local construction",
       "changes caused by local population growth",
       "changes caused by local economic growth",
       "changes that add new places for families to live and work",
       "changes that expand the built-up footprint of the town",
       "changes that come with new housing development"),
    _t("buildings", "disappear",
       "changes that would reduce people's living areas",
       "changes that slow down urbanization",
       "changes brought by optimization and renovation of old buildings",
       "changes possibly caused by war or natural disasters",
       "changes that clear structures from the land",
       "changes caused by demolition work in the neighborhood",
       "changes that remove housing from the area",
       "changes left after old constructions were torn down"),
    _t("trees", "appear",
       "changes that make the air fresher for residents",
       "changes brought by a local afforestation program",
       "changes that expand the forest canopy",
       "changes that offer more shade in summer",
       "changes caused by planting campaigns",
       "changes that help absorb more carbon dioxide",
       "changes that give birds new places to nest",
       "changes that turn bare ground into woodland"),
    _t("trees", "disappear",
       "changes caused by logging activity",
       "changes that shrink the forest canopy",
       "changes that reduce shade for the neighborhood",
       "changes possibly caused by a forest fire",
       "changes that strip woodland from the land",
       "changes brought by clearing trees for development",
       "changes that leave fewer places for birds to nest",
       "changes that remove green cover from the scene"),
    _t("low vegetation", "appear",
       "changes that bring new grass cover to the ground",
       "changes caused by spring regrowth of plants",
       "changes that green up open land",
       "changes brought by sowing new lawns",
       "changes that expand meadow cover",
       "changes that soften bare soil with plants",
       "changes caused by cultivating ground cover",
       "changes that add fresh greenery at ground level"),
    _t("low vegetation", "disappear",
       "changes that leave the ground bare of grass",
       "changes caused by drought killing the lawns",
       "changes that shrink the meadow cover",
       "changes brought by paving over green space",
       "changes that strip ground-level greenery",
       "changes caused by trampling and overuse of lawns",
       "changes that dry out the grassland",
       "changes that remove low plant cover from the scene"),
    _t("water", "appear",
       "changes that store more water for the dry season",
       "changes brought by building a new reservoir",
       "changes caused by seasonal flooding",
       "changes that expand the wet surface of the scene",
       "changes that create new ponds on the land",
       "changes caused by rising water levels",
       "changes that add places for fish to live",
       "changes that turn dry land into water surface"),
    _t("water", "disappear",
       "changes caused by a drought drying the ponds",
       "changes that shrink the wet surface of the scene",
       "changes brought by draining a reservoir",
       "changes that expose the former lakebed",
       "changes caused by falling water levels",
       "changes that remove standing water from the land",
       "changes that turn water surface into dry land",
       "changes brought by land reclamation from the lake"),
    _t("playground", "appear",
       "changes that give children new places to play",
       "changes brought by building sports facilities",
       "changes that add recreation grounds to the area",
       "changes caused by investment in public sports",
       "changes that create space for outdoor exercise",
       "changes that bring a new running track to the school",
       "changes that expand leisure facilities for residents",
       "changes caused by constructing a new sports field"),
    _t("playground", "disappear",
       "changes that take away places for children to play",
       "changes caused by closing the sports ground",
       "changes that remove recreation space from the area",
       "changes brought by converting the sports field to other use",
       "changes that reduce outdoor exercise space",
       "changes that dismantle the running track",
       "changes that shrink leisure facilities for residents",
       "changes possibly caused by abandoning the playground"),
    _t("non-vegetated surface", "appear",
       "changes that pave the ground with bare surface",
       "changes brought by laying new roads or lots",
       "changes that expand hardened ground cover",
       "changes caused by site preparation for construction",
       "changes that turn green land into bare ground",
       "changes that add impervious surface to the scene",
       "changes brought by grading land for development",
       "changes that leave cleared earth where plants were"),
    _t("non-vegetated surface", "disappear",
       "changes that replace bare ground with other cover",
       "changes caused by vegetation reclaiming cleared land",
       "changes that shrink the hardened surface",
       "changes brought by greening former lots",
       "changes that remove bare earth from the scene",
       "changes caused by redeveloping empty ground",
       "changes that cover the exposed soil",
       "changes that turn bare surface into useful land"),
])


def make_text(category: str, direction: str, task_type: str, rng=None):
    """Question/answer pair for one sample.

    direction "absent" marks a negative sample: the question still asks
    about the category, the answer declines and carries no change marker.
    """
    if task_type not in TASK_TYPES:
        raise ContractError(f"unknown task_type {task_type!r}")
    if category not in CATEGORIES:
        raise ContractError(f"unknown category {category!r}")
    if direction not in ("appear", "disappear", "absent"):
        raise ContractError(f"unknown direction {direction!r}")
    rng = rng if rng is not None else np.random.default_rng(0)

    if task_type == "non_reasoning":
        question = QUESTION_WORDS[category]
    else:
        tdir = direction
        if tdir == "absent":
            tdir = str(rng.choice(("appear", "disappear")))
        pool = IMPLICIT_TEMPLATES[(category, tdir)]
        question = str(pool[int(rng.integers(0, len(pool)))])

    if direction == "absent":
        answer = pr.build_answer(None)
        if task_type == "implicit_with_explanation":
            answer = f"{answer} The scene shows no change of {category}."
    else:
        answer = pr.build_answer(category)
        if task_type == "implicit_with_explanation":
            answer = (f"{answer} The {category} in the scene "
                      f"{_DIR_VERB[direction]} between the two times.")
    return question, answer


# ---------------------------------------------------------------------------
# mask and manifest IO
# ---------------------------------------------------------------------------

def save_mask(path, mask: np.ndarray) -> None:
    """Boolean or {0,1} [H, W] array to a 1-bit PNG."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2D, got shape {m.shape}")
    Image.fromarray((m.astype(np.uint8) * 255)).convert("1").save(path)


def load_mask(path) -> np.ndarray:
    """1-bit PNG back to a uint8 {0,1} [H, W] array."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("1"), dtype=np.uint8) > 0).astype(np.uint8)


def emit_manifest(samples, out_dir) -> list:
    """Write per-sample JSON manifests; returns the file paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for sid, entry in samples:
        p = os.path.join(out_dir, f"{sid}.json")
        try:
            with open(p, "w", encoding="utf-8") as f:
                f.write(entry.to_json())
        except OSError as e:
            raise ContractError(f"manifest write failed at {p}: {e}") from e
        paths.append(p)
    return paths


def load_manifest(path) -> ManifestEntry:
    with open(path, "r", encoding="utf-8") as f:
        return ManifestEntry.from_json(f.read())


# ---------------------------------------------------------------------------
# splits and tiling
# ---------------------------------------------------------------------------

def split(sample_ids, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffle then floor-sized partitions, remainder to train."""
    if len(ratios) != 3:
        raise ContractError("ratios must be (train, val, test)")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios {ratios} must be non-negative and sum to 1")
    ids = list(sample_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val, n_test = int(n * ratios[1]), int(n * ratios[2])
    n_train = n - n_val - n_test
    return (shuffled[:n_train],
            shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def tile_grid(height: int, width: int, tile_size: int):
    """Rows/cols of the non-overlapping tiling; partial edge tiles drop."""
    if tile_size < 1:
        raise ContractError("tile_size must be positive")
    return height // tile_size, width // tile_size


def tile(img1: np.ndarray, img2: np.ndarray, mask: np.ndarray,
         tile_size: int) -> list:
    """Cut a co-registered pair + mask into non-overlapping square tiles."""
    if img1.shape != img2.shape:
        raise DimensionError(f"image dims differ: {img1.shape} vs {img2.shape}")
    if img1.shape[-2:] != mask.shape[-2:]:
        raise DimensionError(f"mask dims {mask.shape} do not match images")
    h, w = img1.shape[-2], img1.shape[-1]
    rows, cols = tile_grid(h, w, tile_size)
    out = []
    for r in range(rows):
        for c in range(cols):
            ys = slice(r * tile_size, (r + 1) * tile_size)
            xs = slice(c * tile_size, (c + 1) * tile_size)
            out.append((img1[..., ys, xs], img2[..., ys, xs], mask[..., ys, xs]))
    return out


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _draw_sample(master_seed: int, index: int, size: int):
    """One fully materialized sample; deterministic in (master_seed, index)."""
    rng = np.random.default_rng([master_seed, index])
    scene_seed = int(rng.integers(0, 2 ** 31))
    spec1, img1 = generate_scene(scene_seed, size)

    positive = rng.uniform() < 0.75
    task_type = str(rng.choice(TASK_TYPES, p=[0.4, 0.4, 0.2]))

    if positive:
        for _ in range(32):
            category = str(rng.choice(CATEGORIES))
            direction = str(rng.choice(("appear", "disappear")))
            try:
                event = propose_event(spec1, category, direction, rng)
                spec2, mask = mutate_scene(spec1, event)
                break
            except RetrySignal:
                continue
        else:
            raise ContractError(f"sample {index}: no feasible event found")
        question, answer = make_text(category, direction, task_type, rng)
        img2 = render_scene(spec2)
        meta = {"task_type": task_type, "category": category,
                "direction": direction, "has_chg": True,
                "scene_seed": scene_seed}
        return img1, img2, mask, question, answer, meta

    # Negative: ask about a category absent at both times. A distractor
    # event in some other category usually still happens, so the model
    # cannot shortcut "identical images means decline".
    present = {o.category for o in spec1.objects}
    absent = [c for c in CATEGORIES if c not in present]
    if not absent:
        absent = [str(rng.choice(CATEGORIES))]  # crowded scene fallback
        # remove that category so it is genuinely absent at both times
        spec1 = SceneSpec(spec1.seed, spec1.size, spec1.noise_key,
                          tuple(o for o in spec1.objects
                                if o.category != absent[0]))
        img1 = render_scene(spec1)
    asked = str(rng.choice(absent))
    spec2 = spec1
    if rng.uniform() < 0.7:
        for _ in range(32):
            cat = str(rng.choice([c for c in CATEGORIES if c != asked]))
            direction = str(rng.choice(("appear", "disappear")))
            try:
                event = propose_event(spec1, cat, direction, rng)
                spec2, _ = mutate_scene(spec1, event)
                break
            except RetrySignal:
                continue
    img2 = render_scene(spec2)
    mask = np.zeros((size, size), dtype=bool)
    question, answer = make_text(asked, "absent", task_type, rng)
    meta = {"task_type": task_type, "category": asked,
            "direction": "absent", "has_chg": False,
            "scene_seed": scene_seed}
    return img1, img2, mask, question, answer, meta


def build_dataset(out_dir, n_pairs: int, seed: int = 0, size: int = 64,
                  ratios=(0.8, 0.1, 0.1)):
    """Generate a full on-disk dataset: images, masks, manifests, splits.

    Layout: images/, masks/, samples/ (one JSON per sample, the five
    manifest fields only), meta.json (auxiliary labels), splits.json.
    """
    if n_pairs < 1:
        raise ContractError("n_pairs must be positive")
    from .vision import save_image

    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    entries, metas = [], {}
    for i in range(n_pairs):
        img1, img2, mask, question, answer, meta = _draw_sample(seed, i, size)
        sid = f"{i:05d}"
        p1 = os.path.join(img_dir, f"{sid}_t1.png")
        p2 = os.path.join(img_dir, f"{sid}_t2.png")
        pm = os.path.join(mask_dir, f"{sid}_mask.png")
        save_image(p1, img1)
        save_image(p2, img2)
        save_mask(pm, mask)
        entries.append((sid, ManifestEntry(
            img1_path=os.path.relpath(p1, out_dir),
            img2_path=os.path.relpath(p2, out_dir),
            mask_path=os.path.relpath(pm, out_dir),
            question=question, answer=answer)))
        metas[sid] = meta

    emit_manifest(entries, os.path.join(out_dir, "samples"))
    tr, va, te = split([sid for sid, _ in entries], ratios, seed)
    with open(os.path.join(out_dir, "splits.json"), "w", encoding="utf-8") as f:
        json.dump({"train": tr, "val": va, "test": te}, f, indent=2)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(metas, f, indent=2)
    return entries


@dataclass(frozen=True)
class DatasetSample:
    sid: str
    img1: np.ndarray
    img2: np.ndarray
    mask: np.ndarray
    question: str
    answer: str
    meta: dict


def load_dataset(root, split_name: str = "train"):
    """Read one split back into memory as DatasetSample records."""
    with open(os.path.join(root, "splits.json"), "r", encoding="utf-8") as f:
        splits = json.load(f)
    if split_name not in splits:
        raise ContractError(f"unknown split {split_name!r}")
    with open(os.path.join(root, "meta.json"), "r", encoding="utf-8") as f:
        metas = json.load(f)
    from .vision import load_image

    out = []
    for sid in splits[split_name]:
        entry = load_manifest(os.path.join(root, "samples", f"{sid}.json"))
        out.append(DatasetSample(
            sid=sid,
            img1=load_image(os.path.join(root, entry.img1_path)),
            img2=load_image(os.path.join(root, entry.img2_path)),
            mask=load_mask(os.path.join(root, entry.mask_path)),
            question=entry.question,
            answer=entry.answer,
            meta=metas.get(sid, {})))
    return out


def dataset_corpus(root) -> list:
    """All question/answer prompt texts, for tokenizer training."""
    with open(os.path.join(root, "splits.json"), "r", encoding="utf-8") as f:
        splits = json.load(f)
    with open(os.path.join(root, "meta.json"), "r", encoding="utf-8") as f:
        metas = json.load(f)
    texts = []
    for split_name in ("train", "val", "test"):
        for sid in splits[split_name]:
            entry = load_manifest(os.path.join(root, "samples", f"{sid}.json"))
            explain = metas[sid]["task_type"] == "implicit_with_explanation"
            texts.append(pr.build_prompt(entry.question, explain=explain).text)
            texts.append(entry.answer)
    return texts
