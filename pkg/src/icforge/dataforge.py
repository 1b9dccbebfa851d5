"""Synthetic triplet forging.

Each record is built in stages mirroring a production data pipeline:
render a clean reference/target scene pair around a shared labeled
object, sample a rectangular sub-mask inside the object, corrupt the
target inside that sub-mask under one of four modes, composite, screen
the result through quality filters, and write everything to disk with
content digests in a line-delimited manifest.

The four degradation modes correspond to the inpainting prompt types a
generative editor would receive: latin text, an alternate writing
system, logos, and a promptless texture pass.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import font5x7 as font
from .errors import ContractError, SamplingError, ValidationError
from .imageio import save_image, save_mask
from .metrics import subject_region_error
from .model import NOUNS, prompt_text
from .remote import ChatClient, image_part, parse_yes_no, text_part, user_message

PIPELINE_VERSION = 1

MODES = ("glyph-swap", "glyph-swap-alt-alphabet", "logo-replace", "texture-blur")

# luminance weights shared by the contrast checks
_LUM = np.array([0.299, 0.587, 0.114])

CELL_W, CELL_H = 6, 8
LOGO_PANEL = 10
EMBLEM = 8
N_EMBLEMS = 6

OBJECT_AREA_LO, OBJECT_AREA_HI = 0.10, 0.60
SUBMASK_LO, SUBMASK_HI = 0.20, 0.70

PROMPT_TEXT_VISIBLE = (
    "Determine whether the text details in the input image are both "
    "strictly clearly visible and fully readable. If any part of the text "
    "is blurred, low-resolution, or difficult to recognize, answer 'No'. "
    "Otherwise, answer 'Yes'. Respond with only 'Yes' or 'No', followed by "
    "a brief reason."
)
PROMPT_TAG = (
    "Given the image of an object, return only the most general category "
    "of the object using exactly 1 to 3 words. Strictly avoid any "
    "additional details or descriptions."
)
PROMPT_SAME_PRODUCT = (
    "Please analyze if the extracted region in Image 1 corresponds to the "
    "product in Image 2. Ignore the background and focus only on the main "
    "object. 1. Are the objects in both images the same product? If Image 2 "
    "contains only a small portion of a local region from Image 1, consider "
    "it as No. (Yes/No). 2. Explain based on visual features such as shape, "
    "color, texture, and context. If the object in Image 2 contains the "
    "mask region, describe the match."
)
PROMPT_DEGRADATION = (
    "Is there is obvious distorted text or mismatched elements in the "
    "image. Answer with 'Yes' or 'No', followed by a brief explanation of "
    "the reason"
)


# ---------------------------------------------------------------------------
# emblems
# ---------------------------------------------------------------------------

def emblem_mask(logo_id: int, size: int = EMBLEM) -> np.ndarray:
    """Procedural 2-D emblem bitmaps addressed by id."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    dy, dx = yy - c, xx - c
    which = logo_id % N_EMBLEMS
    if which == 0:
        return (dy * dy + dx * dx) <= (size / 2 - 0.5) ** 2
    if which == 1:
        return (np.abs(dy) + np.abs(dx)) <= size / 2
    if which == 2:
        return (np.abs(dy) <= size / 6) | (np.abs(dx) <= size / 6)
    if which == 3:
        r2 = dy * dy + dx * dx
        return (r2 <= (size / 2 - 0.5) ** 2) & (r2 >= (size / 4 - 0.5) ** 2)
    if which == 4:
        quarter = max(size // 4, 1)
        return ((yy // quarter + xx // quarter) % 2) == 0
    return yy >= (size - 1) - xx


# ---------------------------------------------------------------------------
# scene rendering
# ---------------------------------------------------------------------------

@dataclass
class SceneMeta:
    """Everything needed to re-render or audit the object."""

    rect: tuple[int, int, int, int]  # x0, y0, w, h
    rows: int
    cols: int
    glyph_ids: list[list[int]]
    logo_id: int
    fg: tuple[int, int, int]
    bg: tuple[int, int, int]
    border: tuple[int, int, int]
    shift: int
    tag: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "rect": list(self.rect), "rows": self.rows, "cols": self.cols,
            "glyph_ids": self.glyph_ids, "logo_id": self.logo_id,
            "fg": list(self.fg), "bg": list(self.bg),
            "border": list(self.border), "shift": self.shift,
            "tag": self.tag, "seed": self.seed,
        }


@dataclass
class SceneSample:
    reference: np.ndarray
    target: np.ndarray
    object_mask: np.ndarray
    tag: str
    meta: SceneMeta


def _gradient(side: int, c0: np.ndarray, c1: np.ndarray, vertical: bool) -> np.ndarray:
    ramp = np.linspace(0.0, 1.0, side)[:, None]
    line = c0[None, :] * (1 - ramp) + c1[None, :] * ramp  # (side, 3)
    img = np.repeat(line[:, None, :], side, axis=1)
    if not vertical:
        img = img.transpose(1, 0, 2)
    return np.rint(img).astype(np.uint8)


def draw_glyph_grid(canvas: np.ndarray, x: int, y: int,
                    glyph_ids: list[list[int]], alphabet: str,
                    fg: np.ndarray, bg: np.ndarray) -> None:
    """Stamp a grid of glyph cells onto canvas, clipped at its edges."""
    h, w = canvas.shape[:2]
    for i, row in enumerate(glyph_ids):
        for j, gid in enumerate(row):
            cell = np.tile(bg, (CELL_H, CELL_W, 1)).astype(np.int64)
            bits = font.glyph(int(gid), alphabet)
            cell[:font.GLYPH_H, :font.GLYPH_W][bits > 0] = fg
            cy, cx = y + i * CELL_H, x + j * CELL_W
            if cy >= h or cx >= w:
                continue
            ch = min(CELL_H, h - cy)
            cw = min(CELL_W, w - cx)
            canvas[cy:cy + ch, cx:cx + cw] = cell[:ch, :cw]


def _draw_object(canvas: np.ndarray, meta: SceneMeta, shift: int) -> None:
    x0, y0, w, h = meta.rect
    fg = np.array(meta.fg, dtype=np.int64) + shift
    bg = np.array(meta.bg, dtype=np.int64) + shift
    border = np.array(meta.border, dtype=np.int64) + shift
    for arr in (fg, bg, border):
        if arr.min() < 0 or arr.max() > 255:
            raise ContractError("object palette leaves uint8 range under shift")
    region = np.tile(bg, (h, w, 1))
    region[0, :] = border
    region[-1, :] = border
    region[:, 0] = border
    region[:, -1] = border
    ey = (h - EMBLEM) // 2
    emblem = emblem_mask(meta.logo_id)
    region[ey:ey + EMBLEM, 2:2 + EMBLEM][emblem] = fg
    ly = (h - meta.rows * CELL_H) // 2
    draw_glyph_grid(region, LOGO_PANEL + 1, ly, meta.glyph_ids, "main", fg, bg)
    canvas[y0:y0 + h, x0:x0 + w] = region.astype(np.uint8)


def synth_scene(seed: int, side: int = 32) -> SceneSample:
    """Render an aligned reference/target pair around one labeled object.

    The object carries a glyph label and an emblem; the target repaints
    it under a global brightness shift on a different background, so
    target object pixels equal reference object pixels plus the shift,
    exactly and without clipping.
    """
    if side < 24:
        raise ValidationError(f"scene side {side} too small for the layout")
    rng = np.random.default_rng(seed)
    area = side * side
    combos = []
    for rows in (1, 2):
        for cols in (2, 3):
            w = LOGO_PANEL + 2 + cols * CELL_W
            h = max(LOGO_PANEL, rows * CELL_H + 2)
            if w + 2 <= side and h + 2 <= side and \
                    OBJECT_AREA_LO <= (w * h) / area <= OBJECT_AREA_HI:
                combos.append((rows, cols, w, h))
    if not combos:
        raise ValidationError(f"no object layout fits a {side}x{side} scene")
    rows, cols, w, h = combos[int(rng.integers(len(combos)))]
    tag = NOUNS[int(rng.integers(len(NOUNS)))]
    glyph_ids = [[int(g) for g in rng.integers(0, font.N_GLYPHS, size=cols)]
                 for _ in range(rows)]
    logo_id = int(rng.integers(N_EMBLEMS))
    bg = rng.integers(70, 211, size=3)
    for _ in range(50):
        fg = rng.integers(40, 216, size=3)
        if abs(float(_LUM @ fg) - float(_LUM @ bg)) >= 60.0:
            break
    else:
        # shift-safe extremes: stay inside u8 even after +-18
        fg = np.full(3, 25 if float(_LUM @ bg) > 127 else 230)
    border = bg - 30
    x0 = int(rng.integers(1, side - w))
    y0 = int(rng.integers(1, side - h))
    shift = int(rng.integers(1, 19)) * (1 if rng.random() < 0.5 else -1)

    def scenery(anchor: np.ndarray, vertical: bool) -> np.ndarray:
        for _ in range(50):
            c0 = rng.integers(0, 256, size=3)
            c1 = rng.integers(0, 256, size=3)
            mid = (c0 + c1) / 2.0
            if np.abs(mid - anchor).sum() >= 90:
                return _gradient(side, c0.astype(float), c1.astype(float), vertical)
        return _gradient(side, np.zeros(3), np.full(3, 40.0), vertical)

    meta = SceneMeta((x0, y0, w, h), rows, cols, glyph_ids, logo_id,
                     tuple(int(v) for v in fg), tuple(int(v) for v in bg),
                     tuple(int(v) for v in border), shift, tag, int(seed))
    reference = scenery(bg.astype(float), vertical=True)
    _draw_object(reference, meta, shift=0)
    target = scenery(bg.astype(float), vertical=False)
    _draw_object(target, meta, shift=shift)
    object_mask = np.zeros((side, side), dtype=np.uint8)
    object_mask[y0:y0 + h, x0:x0 + w] = 1
    ratio = float(object_mask.sum()) / area
    if not (OBJECT_AREA_LO <= ratio <= OBJECT_AREA_HI):
        raise ContractError(f"object area ratio {ratio:.3f} out of range")
    return SceneSample(reference, target, object_mask, tag, meta)


# ---------------------------------------------------------------------------
# sub-mask sampling
# ---------------------------------------------------------------------------

def sample_submask(object_mask: np.ndarray, rng: np.random.Generator,
                   lo: float = SUBMASK_LO, hi: float = SUBMASK_HI,
                   max_tries: int = 200) -> np.ndarray:
    """Rectangle intersected with the object covering lo..hi of its area."""
    mask = np.asarray(object_mask) > 0
    total = int(mask.sum())
    if total == 0:
        raise ValidationError("object mask is empty")
    ys, xs = np.nonzero(mask)
    y_lo, y_hi = int(ys.min()), int(ys.max())
    x_lo, x_hi = int(xs.min()), int(xs.max())
    for _ in range(max_tries):
        xa, xb = sorted(rng.integers(x_lo, x_hi + 2, size=2))
        ya, yb = sorted(rng.integers(y_lo, y_hi + 2, size=2))
        if xa == xb or ya == yb:
            continue
        sub = np.zeros_like(mask)
        sub[ya:yb, xa:xb] = True
        sub &= mask
        ratio = sub.sum() / total
        if lo <= ratio <= hi:
            return sub.astype(np.uint8)
    raise SamplingError(
        f"no sub-mask with area ratio in [{lo}, {hi}] after {max_tries} tries"
    )


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _region_palette(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bg = np.rint(np.median(pixels.reshape(-1, 3), axis=0)).astype(np.int64)
    fg = 255 - bg
    if abs(float(_LUM @ fg) - float(_LUM @ bg)) < 60.0:
        fg = np.clip(bg + (120 if float(_LUM @ bg) <= 127 else -120), 0, 255)
    return fg, bg


def degrade(target: np.ndarray, sub_mask: np.ndarray, mode: str,
            rng: np.random.Generator) -> np.ndarray:
    """Corrupt the target inside sub_mask; everything else is untouched."""
    if mode not in MODES:
        raise ValidationError(f"unknown degradation mode '{mode}'")
    if target.shape[:2] != sub_mask.shape:
        raise ValidationError("sub-mask shape must match the image")
    sub = np.asarray(sub_mask) > 0
    degraded = target.copy()
    if not sub.any():
        return degraded
    x0, y0, x1, y1 = _bbox(sub)
    box = (slice(y0, y1), slice(x0, x1))
    inside = sub[box]
    if mode in ("glyph-swap", "glyph-swap-alt-alphabet"):
        alphabet = "main" if mode == "glyph-swap" else "alt"
        fg, bg = _region_palette(target[sub])
        canvas = np.tile(bg, (y1 - y0, x1 - x0, 1))
        n_rows = max(1, -(-(y1 - y0) // CELL_H))
        n_cols = max(1, -(-(x1 - x0) // CELL_W))
        ids = [[int(g) for g in rng.integers(0, font.N_GLYPHS, size=n_cols)]
               for _ in range(n_rows)]
        draw_glyph_grid(canvas, 0, 0, ids, alphabet, fg, bg)
        degraded[box][inside] = canvas[inside]
    elif mode == "logo-replace":
        fg, bg = _region_palette(target[sub])
        canvas = np.tile(bg, (y1 - y0, x1 - x0, 1))
        size = min(y1 - y0, x1 - x0)
        if size >= 2:
            stamp = emblem_mask(int(rng.integers(N_EMBLEMS)), size)
            oy = ((y1 - y0) - size) // 2
            ox = ((x1 - x0) - size) // 2
            canvas[oy:oy + size, ox:ox + size][stamp] = fg
        degraded[box][inside] = canvas[inside]
    else:  # texture-blur
        blurred = ndimage.uniform_filter(target.astype(np.float64),
                                         size=(5, 5, 1))
        rolled = np.roll(blurred, 1 if rng.random() < 0.5 else 2, axis=2)
        degraded[sub] = np.rint(rolled[sub]).astype(np.uint8)
    if np.array_equal(degraded[sub], target[sub]):
        # belt and braces: the corruption must be visible
        degraded[sub] = 255 - target[sub]
    return degraded


def compose_final(object_mask: np.ndarray, degraded: np.ndarray,
                  generated: np.ndarray) -> np.ndarray:
    """Mask-select degraded pixels over the generated image, exactly."""
    if degraded.shape != generated.shape:
        raise ValidationError("composite inputs must share a shape")
    if object_mask.shape != degraded.shape[:2]:
        raise ValidationError("object mask shape must match the images")
    mask = np.asarray(object_mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("object mask must be binary")
    return np.where(mask[..., None] > 0, degraded, generated)


# ---------------------------------------------------------------------------
# quality filtering
# ---------------------------------------------------------------------------

@dataclass
class ForgeSample:
    scene: SceneSample
    sub_mask: np.ndarray
    mode: str
    degraded: np.ndarray


@dataclass
class FilterThresholds:
    min_text_contrast: float = 30.0   # luminance p90 - p10 over the object
    degradation_lo: float = 1.0       # mean abs diff inside the sub-mask
    degradation_hi: float = 200.0


class OracleFilterBackend:
    """Deterministic screening checks standing in for a remote judge."""

    kind = "oracle"

    def __init__(self, thresholds: FilterThresholds | None = None):
        self.thresholds = thresholds or FilterThresholds()

    def text_visible(self, image: np.ndarray, object_mask: np.ndarray) -> bool:
        lum = image[np.asarray(object_mask) > 0].astype(np.float64) @ _LUM
        if lum.size == 0:
            return False
        spread = float(np.percentile(lum, 90) - np.percentile(lum, 10))
        return spread >= self.thresholds.min_text_contrast

    def same_product(self, sample: ForgeSample) -> bool:
        scene = sample.scene
        on = scene.object_mask > 0
        diff = scene.target.astype(np.int64) - scene.reference.astype(np.int64)
        return bool((diff[on] == scene.meta.shift).all())

    def degradation_ok(self, sample: ForgeSample) -> bool:
        sub = sample.sub_mask > 0
        gap = np.abs(sample.degraded.astype(np.int64)
                     - sample.scene.target.astype(np.int64))[sub]
        mean_gap = float(gap.mean()) if gap.size else 0.0
        return self.thresholds.degradation_lo <= mean_gap <= self.thresholds.degradation_hi


class RemoteFilterBackend:
    """Quality screening through a chat endpoint with Yes/No parsing."""

    kind = "remote"

    def __init__(self, client: ChatClient):
        self.client = client

    def text_visible(self, image: np.ndarray, object_mask: np.ndarray) -> bool:
        reply = self.client.chat([
            user_message(text_part(PROMPT_TEXT_VISIBLE), image_part(image))
        ])
        return parse_yes_no(reply)

    def same_product(self, sample: ForgeSample) -> bool:
        reply = self.client.chat([
            user_message(text_part(PROMPT_SAME_PRODUCT),
                         image_part(sample.scene.reference),
                         image_part(sample.scene.target))
        ])
        return parse_yes_no(reply)

    def degradation_ok(self, sample: ForgeSample) -> bool:
        reply = self.client.chat([
            user_message(text_part(PROMPT_DEGRADATION),
                         image_part(sample.degraded))
        ])
        # a Yes means the degradation broke the image beyond use
        return not parse_yes_no(reply)


def quality_filter(sample: ForgeSample, backend) -> tuple[bool, str]:
    """Run the screening sequence; the first failed check names the drop."""
    scene = sample.scene
    if not backend.text_visible(scene.reference, scene.object_mask):
        return False, "reference text not clearly visible"
    if not backend.text_visible(scene.target, scene.object_mask):
        return False, "target text not clearly visible"
    if not backend.same_product(sample):
        return False, "reference and target disagree on the product"
    if not backend.degradation_ok(sample):
        return False, "degradation invisible or too destructive"
    return True, "ok"


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

FILE_KEYS = ("reference", "degraded", "target", "object_mask", "sub_mask")


@dataclass
class ManifestRecord:
    id: str
    seed: int
    tag: str
    prompt: str
    files: dict[str, str]
    sha256: dict[str, str]
    mode: str
    pipeline_version: int = PIPELINE_VERSION

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id,
            "seed": self.seed,
            "tag": self.tag,
            "prompt": self.prompt,
            "files": {k: self.files[k] for k in FILE_KEYS},
            "sha256": {k: self.sha256[k] for k in FILE_KEYS},
            "mode": self.mode,
            "pipeline_version": self.pipeline_version,
        })

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        return cls(d["id"], d["seed"], d["tag"], d["prompt"], d["files"],
                   d["sha256"], d["mode"], d["pipeline_version"])


@dataclass
class DatasetManifest:
    version: int
    seed: int
    image_side: int
    records: list[ManifestRecord] = field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({
                "version": self.version, "seed": self.seed,
                "image_side": self.image_side, "count": len(self.records),
            }) + "\n")
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValidationError(f"manifest {path} is empty")
        head = json.loads(lines[0])
        manifest = cls(head["version"], head["seed"], head["image_side"])
        for line in lines[1:]:
            manifest.records.append(ManifestRecord.from_dict(json.loads(line)))
        if len(manifest.records) != head["count"]:
            raise ValidationError("manifest count disagrees with its records")
        return manifest

    def verify(self, base_dir) -> None:
        base = Path(base_dir)
        for rec in self.records:
            for key in FILE_KEYS:
                path = base / rec.files[key]
                if not path.exists():
                    raise ValidationError(f"{rec.id}: missing file {path}")
                digest = hashlib.sha256(path.read_bytes()).hexdigest()
                if digest != rec.sha256[key]:
                    raise ValidationError(f"{rec.id}: digest mismatch on {key}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def forge_dataset(out_dir, n: int, seed: int, side: int = 32,
                  backend=None, max_attempts: int = 20) -> DatasetManifest:
    """Forge n triplets under a global seed and write the manifest.

    Every record derives its own seed from (seed, index, attempt), so a
    repeated run reproduces files byte for byte, and records are
    independent of each other.
    """
    if n < 1:
        raise ValidationError("cannot forge an empty dataset")
    backend = backend or OracleFilterBackend()
    out = Path(out_dir)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(1, int(seed), int(side))
    for i in range(n):
        record = None
        for attempt in range(max_attempts):
            record_seed = int(
                np.random.SeedSequence([seed, i, attempt]).generate_state(1)[0]
            )
            scene = synth_scene(record_seed, side)
            stage_rng = np.random.default_rng([record_seed, 1])
            try:
                sub_mask = sample_submask(scene.object_mask, stage_rng)
            except SamplingError:
                continue
            mode = MODES[int(stage_rng.integers(len(MODES)))]
            raw = degrade(scene.target, sub_mask, mode, stage_rng)
            final = compose_final(scene.object_mask, raw, scene.target)
            sample = ForgeSample(scene, sub_mask, mode, final)
            keep, _reason = quality_filter(sample, backend)
            if not keep:
                continue
            rid = f"{i:05d}"
            names = {
                "reference": f"samples/{rid}_reference.png",
                "degraded": f"samples/{rid}_degraded.png",
                "target": f"samples/{rid}_target.png",
                "object_mask": f"samples/{rid}_object_mask.png",
                "sub_mask": f"samples/{rid}_sub_mask.png",
            }
            save_image(out / names["reference"], scene.reference)
            save_image(out / names["degraded"], final)
            save_image(out / names["target"], scene.target)
            save_mask(out / names["object_mask"], scene.object_mask)
            save_mask(out / names["sub_mask"], sub_mask)
            sidecar = dict(scene.meta.to_dict())
            sidecar["seed"] = record_seed
            sidecar["mode"] = mode
            sidecar["sub_rect"] = list(_bbox(sub_mask))
            (samples_dir / f"{rid}_meta.json").write_text(
                json.dumps(sidecar, sort_keys=True))
            record = ManifestRecord(
                id=rid, seed=record_seed, tag=scene.tag,
                prompt=prompt_text(scene.tag), files=names,
                sha256={k: _sha256(out / v) for k, v in names.items()},
                mode=mode,
            )
            break
        if record is None:
            raise SamplingError(
                f"record {i} failed quality screening {max_attempts} times"
            )
        manifest.records.append(record)
    manifest.save(out / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# iterative enhancement
# ---------------------------------------------------------------------------

def iterative_enhance(dataset_dir, ckpt_path, fraction: float = 0.25,
                      seed: int = 0, sample_steps: int = 12,
                      corrector=None) -> dict:
    """Regenerate the weakest targets with the trained critic.

    Picks the configured fraction of records with the highest
    subject-region error against their reference, regenerates each
    target, and keeps the result only when it does not score worse.
    Bumps the manifest version; a zero fraction only bumps the version.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValidationError(f"fraction {fraction} outside [0, 1]")
    base = Path(dataset_dir)
    manifest = DatasetManifest.load(base / "manifest.jsonl")
    stats = {"selected": 0, "replaced": 0, "failed": 0}
    k = int(round(fraction * len(manifest.records)))
    if k > 0:
        from .imageio import load_image, load_mask
        if corrector is None:
            from .agents import generate_correction
            from .checkpoint import load_checkpoint
            model, flags, _, _ = load_checkpoint(ckpt_path)

            def corrector(reference, current, tag, sample_seed):
                return generate_correction(model, flags, reference, current,
                                           tag, steps=sample_steps,
                                           seed=sample_seed)

        scored = []
        for rec in manifest.records:
            reference = load_image(base / rec.files["reference"])
            target = load_image(base / rec.files["target"])
            mask = load_mask(base / rec.files["object_mask"])
            scored.append((subject_region_error(reference, target, mask), rec.id))
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        chosen = {rid for _, rid in scored[:k]}
        stats["selected"] = len(chosen)
        for rec in manifest.records:
            if rec.id not in chosen:
                continue
            reference = load_image(base / rec.files["reference"])
            target = load_image(base / rec.files["target"])
            mask = load_mask(base / rec.files["object_mask"])
            before = subject_region_error(reference, target, mask)
            try:
                candidate = corrector(reference, target, rec.tag,
                                      seed + int(rec.id))
            except Exception:
                stats["failed"] += 1
                continue
            after = subject_region_error(reference, candidate, mask)
            if after <= before:
                save_image(base / rec.files["target"], candidate)
                rec.sha256["target"] = _sha256(base / rec.files["target"])
                stats["replaced"] += 1
    manifest.version += 1
    manifest.save(base / "manifest.jsonl")
    return stats
