"""
Procedural target scenes for the synthetic dataset.

A scene is a dark uniform background with one to three bright primitives, each
in its own image quadrant. The first object is the one the instruction refers
to; the category transform is applied to it to produce the target. Source
candidates re-render the recorded pre-transform state with seeded jitter on
that object.
"""
import logging
import re
from dataclasses import replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

from .edit_models import Category, SceneMetadata, SceneObject
from .errors import InputValidationError
from .seeding import RngStreams

logger = logging.getLogger(__name__)

FAMILIES: Dict[str, Tuple[str, ...]] = {
    "square": ("cube", "block", "box", "crate"),
    "disk": ("ball", "coin", "orb", "plate"),
    "tall": ("bottle", "vase", "glass", "candle"),
}

# transform -> (verb of the initial instruction, past form, state word for captions, object families)
TRANSFORMS: Dict[Category, Dict[str, Tuple[str, str, str, Tuple[str, ...]]]] = {
    Category.PHYSICAL: {
        "melt": ("melt", "melted", "melted", ("square", "disk")),
        "tilt": ("tilt", "tilted", "tilted", ("square",)),
        "shatter": ("shatter", "shattered", "shattered", ("square", "disk")),
    },
    Category.TEMPORAL: {
        "age": ("age", "aged", "old", ("square", "disk", "tall")),
        "grow": ("grow", "grown", "grown", ("square", "disk", "tall")),
    },
    Category.CAUSAL: {
        "knock over": ("knock over", "knocked over", "fallen", ("tall",)),
        "burn": ("burn", "burnt", "burnt", ("square", "disk", "tall")),
    },
    Category.STORY: {
        "next": ("move", "moved", "moved", ("square", "disk", "tall")),
    },
}

TEMPLATES: Dict[Category, Tuple[str, ...]] = {
    Category.PHYSICAL: (
        "What would happen if the {obj} {past}?",
        "What would the {obj} look like if it {past}?",
    ),
    Category.TEMPORAL: (
        "What would the {obj} look like after many years?",
        "What would happen to the {obj} after a long time?",
    ),
    Category.CAUSAL: (
        "What would happen if someone tried to {verb} the {obj}?",
        "What would happen if the {obj} was {past}?",
    ),
    Category.STORY: (
        "What would happen next to the {obj}?",
        "What would the next scene of the {obj} look like?",
    ),
}

_INITIAL_PATTERN = re.compile(r"^\s*([a-z]+(?: over)?) the ([a-z]+(?: [a-z]+)*)\s*$")

MAX_OFFSET = 2
JITTER_OFFSETS: Tuple[Tuple[int, int], ...] = tuple(
    (dy, dx) for dy in range(-MAX_OFFSET, MAX_OFFSET + 1) for dx in range(-MAX_OFFSET, MAX_OFFSET + 1)
    if (dy, dx) != (0, 0)
)


def _check_dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    if len(dims) != 3:
        raise InputValidationError(f"image dims must be (H, W, C), got {tuple(dims)}")
    h, w, c = (int(d) for d in dims)
    if c != 3:
        raise InputValidationError("the scene renderer draws RGB images (C = 3)")
    if h < 16 or w < 16 or h % 2 or w % 2:
        raise InputValidationError(f"scene images need even H, W >= 16, got {h}x{w}")
    return h, w, c


def object_mask(obj: SceneObject, height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    hh, hw = obj.half_extents
    dr = (rows - obj.center[0]) / hh
    dc = (cols - obj.center[1]) / hw
    if obj.shape == "square":
        return (np.abs(dr) <= 1.0) & (np.abs(dc) <= 1.0)
    if obj.shape == "disk":
        return dr ** 2 + dc ** 2 <= 1.0
    if obj.shape == "diamond":
        return np.abs(dr) + np.abs(dc) <= 1.0
    # notched: a box with a slot cut into its upper middle, still one piece
    box = (np.abs(dr) <= 1.0) & (np.abs(dc) <= 1.0)
    notch = (dr < -1.0 / 3.0) & (np.abs(dc) < 1.0 / 3.0)
    return box & ~notch


def render_objects(objects: Sequence[SceneObject], background: Sequence[float], dims: Sequence[int]) -> np.ndarray:
    """Paint objects in order over a uniform background."""
    h, w, c = _check_dims(dims)
    img = np.empty((h, w, c))
    img[...] = np.asarray(background, dtype=np.float64)
    for obj in objects:
        img[object_mask(obj, h, w)] = np.asarray(obj.color, dtype=np.float64)
    return img


def _quadrant_centres(h: int, w: int) -> List[Tuple[float, float]]:
    qh, qw = h // 2, w // 2
    return [(qh / 2 + r * qh, qw / 2 + c * qw) for r in range(2) for c in range(2)]


def _make_object(rng: np.random.Generator, family: str, centre: Tuple[float, float], quadrant: int) -> SceneObject:
    size = rng.uniform(0.14, 0.19) * quadrant
    offset = rng.integers(-1, 2, size=2)
    name = str(rng.choice(FAMILIES[family]))
    if family == "tall":
        shape, extents = "square", (1.3 * size, 0.6 * size)
    else:
        shape, extents = family, (size, size)
    color = tuple(float(x) for x in rng.uniform(0.65, 1.0, size=3))
    return SceneObject(name=name, shape=shape, center=(centre[0] + offset[0], centre[1] + offset[1]),
                       half_extents=extents, color=color)


def _scaled_color(obj: SceneObject, factor: float) -> Tuple[float, float, float]:
    return tuple(float(c * factor) for c in obj.color)


def apply_transform(obj: SceneObject, transform: str, width: int) -> List[SceneObject]:
    """End state(s) of the referenced object; Story returns the original plus its copy in the right panel."""
    hh, hw = obj.half_extents
    r, c = obj.center
    if transform == "melt":
        return [replace(obj, center=(r + hh * 0.5, c), half_extents=(hh * 0.5, hw * 1.5))]
    if transform == "tilt":
        return [replace(obj, shape="diamond", half_extents=(hh * 1.3, hw * 1.3))]
    if transform == "shatter":
        return [replace(obj, shape="notched")]
    if transform == "age":
        return [replace(obj, color=_scaled_color(obj, 0.7))]
    if transform == "grow":
        return [replace(obj, half_extents=(hh * 1.4, hw * 1.4))]
    if transform == "knock over":
        return [replace(obj, center=(r + (hh - hw), c), half_extents=(hw, hh))]
    if transform == "burn":
        return [replace(obj, color=_scaled_color(obj, 0.55))]
    if transform == "next":
        return [obj, replace(obj, center=(r, c + width // 2))]
    raise ValueError(f"unknown transform: {transform}")


def render_scene(category: Category, seed: int, dims: Sequence[int]) -> Tuple[np.ndarray, SceneMetadata]:
    """
    Render the target image of one scene.

    Returns:
        (target [H, W, 3] in [0, 1], metadata with initial and target object lists)
    """
    h, w, c = _check_dims(dims)
    rng = RngStreams(seed).generator("scene", category.value)
    transforms = TRANSFORMS[category]
    transform = str(rng.choice(sorted(transforms)))
    verb, _, state_word, families = transforms[transform]

    if category is Category.STORY:
        quadrants = [int(q) for q in rng.permutation([0, 2])][: int(rng.integers(1, 3))]
    else:
        quadrants = [int(q) for q in rng.permutation(4)][: int(rng.integers(1, 4))]
    centres = _quadrant_centres(h, w)
    quadrant = min(h, w) // 2
    grey = float(rng.uniform(0.05, 0.15))
    background = (grey, grey, grey)

    referenced = _make_object(rng, str(rng.choice(families)), centres[quadrants[0]], quadrant)
    others = [_make_object(rng, str(rng.choice(("square", "disk"))), centres[q], quadrant) for q in quadrants[1:]]
    initial_objects = [referenced] + others
    target_objects = apply_transform(referenced, transform, w) + others

    target = render_objects(target_objects, background, (h, w, c))
    metadata = SceneMetadata(
        category=category,
        seed=seed,
        transform=transform,
        object_name=referenced.name,
        state_word=state_word,
        initial_instruction=f"{verb} the {referenced.name}",
        background=background,
        initial_objects=initial_objects,
        target_objects=target_objects,
        initial_area=int(object_mask(referenced, h, w).sum()),
    )
    logger.debug(f"Rendered {category.value} scene seed={seed}: {transform} {referenced.name}, "
                 f"{len(target_objects)} objects")
    return target, metadata


def _past_form(verb: str, category: Category) -> str:
    for v, past, _, _ in TRANSFORMS[category].values():
        if v == verb:
            return past
    raise KeyError(verb)


def rewrite_hypothetical(initial_instruction: str, category: Category, seed: int = 0) -> str:
    """
    Turn "<verb> the <object>" into a hypothetical question using the category templates.

    Template index is ``seed % len(templates)``. Instructions that do not parse, or whose
    verb does not belong to the category, become "What would happen if <initial>?".

    Raises:
        InputValidationError: empty instruction
    """
    text = initial_instruction.strip()
    if not text:
        raise InputValidationError("initial instruction must be nonempty")
    match = _INITIAL_PATTERN.match(text.lower())
    if match:
        verb, obj = match.groups()
        try:
            past = _past_form(verb, category)
        except KeyError:
            match = None
    if not match:
        return f"What would happen if {text.rstrip('?').rstrip()}?"
    templates = TEMPLATES[category]
    return templates[seed % len(templates)].format(obj=obj, verb=verb, past=past)


def shift_hue(color: Sequence[float], delta: float) -> Tuple[float, float, float]:
    hsv = rgb2hsv(np.asarray(color, dtype=np.float64).reshape(1, 1, 3))
    hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
    return tuple(float(x) for x in np.clip(hsv2rgb(hsv).reshape(3), 0.0, 1.0))


def jitter_plan(seed: int, m: int) -> List[Tuple[Tuple[int, int], float, float]]:
    """
    (offset, hue shift, size factor) for candidates 1..m-1.

    The 24 non-zero offsets within two pixels are visited in a seeded order; each pass
    over them uses a smaller hue magnitude and flips the size-factor pattern.
    """
    order = RngStreams(seed).generator("candidates").permutation(len(JITTER_OFFSETS))
    plan = []
    for k in range(m - 1):
        cycle, slot = divmod(k, len(JITTER_OFFSETS))
        sign = 1.0 if (slot + cycle) % 2 == 0 else -1.0
        size = 1.1 if (slot // 2 + cycle) % 2 == 0 else 0.9
        plan.append((JITTER_OFFSETS[order[slot]], sign * 0.05 / (cycle + 1), size))
    return plan


def jitter_object(obj: SceneObject, offset: Tuple[int, int], hue: float, size: float) -> SceneObject:
    hh, hw = obj.half_extents
    return replace(obj, center=(obj.center[0] + offset[0], obj.center[1] + offset[1]),
                   half_extents=(hh * size, hw * size), color=shift_hue(obj.color, hue))


def generate_source_candidates(target: np.ndarray, metadata: SceneMetadata, m: int) -> List[np.ndarray]:
    """
    Plausible pre-edit images: candidate 0 is the recorded initial state, the rest jitter
    the referenced object's position, hue and size.

    Raises:
        InputValidationError: m < 1
    """
    if m < 1:
        raise InputValidationError("at least one source candidate is required")
    dims = target.shape
    initial = metadata.initial_objects
    candidates = [render_objects(initial, metadata.background, dims)]
    for offset, hue, size in jitter_plan(metadata.seed, m):
        moved = [jitter_object(initial[0], offset, hue, size)] + list(initial[1:])
        candidates.append(render_objects(moved, metadata.background, dims))
    return candidates


def source_caption(metadata: SceneMetadata) -> str:
    return f"a photo of a {metadata.object_name}"


def target_caption(metadata: SceneMetadata) -> str:
    return f"a photo of a {metadata.state_word} {metadata.object_name}"
