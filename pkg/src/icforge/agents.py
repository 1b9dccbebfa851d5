"""Region agents and the review-gated correction workflow.

Three specialists (inconsistency detector, reference finder, tag
grounder) propose bounding boxes, a critic invocation repaints the
flagged region, and a deterministic coordinator walks the fixed
detect -> find-reference -> correct order with a human review gate
after every step. User rejections can override boxes or delegate to
tag grounding; user boxes always win over agent boxes.
"""

import json
import os
import re
import threading
import uuid
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import autodiff as ad
from .errors import (
    BackendError,
    NotFoundError,
    NumericError,
    ParseError,
    ProtocolError,
    ValidationError,
)
from .imageio import (
    crop,
    encode_png,
    letterbox,
    load_image,
    paste,
    save_image,
    to_float,
    to_uint8,
    unletterbox,
)
from .model import patchify, sample, unpatchify
from .remote import ChatClient, image_part, text_part, user_message

_LUM = np.array([0.299, 0.587, 0.114])

DETECT_PROMPT = (
    "Carefully compare the two images. Image 1 is the reference image "
    "(correct version), and Image 2 is the target image that may contain "
    "defects. Focus only on the main subject of the image, ignoring any "
    "differences in the background. Identify the region in Image 2 that "
    "differs from the corresponding area in Image 1. Differences may "
    "include blur, illegible text, texture inconsistency, artifacts, "
    "missing parts, or any other visual discrepancies.Return ONLY the "
    "bounding box of the different region in Image 2 in the strict "
    "format:[xmin, ymin, xmax, ymax]"
)

FIND_PROMPT = (
    "I will show you a problematic region from image1 and a reference "
    "image2. Please find the corresponding region in image2 that matches "
    "the same area as the problematic region from image1. Return only the "
    "bounding box coordinates in the format [xmin, xmax, ymin, ymax], No "
    "additional text, just the coordinates inside []"
)


def ground_prompt(tag: str) -> str:
    return (
        f'Find the region in this image that best matches the product tag: '
        f'"{tag}". Return ONLY the bounding box in Image in the strict '
        f'format: [xmin, ymin, xmax, ymax]. No extra text.'
    )


COMPLETION_MESSAGE = "Image restoration workflow completed!"

STEP_NAMES = {
    "detect": "Inconsistency Detector",
    "find_ref": "Reference Finder",
    "correct": "ImageCritic",
}


def accept_question(step: str) -> str:
    return f"Accept [{STEP_NAMES[step]}] result? (yes/no):"


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle [xmin, xmax) x [ymin, ymax)."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        for name in ("xmin", "ymin", "xmax", "ymax"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (0 <= self.xmin < self.xmax):
            raise ValidationError(
                f"bbox needs 0 <= xmin < xmax, got xmin={self.xmin} xmax={self.xmax}"
            )
        if not (0 <= self.ymin < self.ymax):
            raise ValidationError(
                f"bbox needs 0 <= ymin < ymax, got ymin={self.ymin} ymax={self.ymax}"
            )

    @property
    def width(self) -> int:
        return self.xmax - self.xmin

    @property
    def height(self) -> int:
        return self.ymax - self.ymin

    def clamp_check(self, width: int, height: int) -> "BBox":
        if self.xmax > width or self.ymax > height:
            raise ValidationError(
                f"bbox {self.to_list()} exceeds image {width}x{height}"
            )
        return self

    def to_list(self) -> list[int]:
        return [self.xmin, self.ymin, self.xmax, self.ymax]

    @classmethod
    def from_seq(cls, seq) -> "BBox":
        vals = list(seq)
        if len(vals) != 4:
            raise ValidationError(f"bbox needs 4 coordinates, got {vals!r}")
        return cls(*vals)


_BRACKETED = re.compile(
    r"\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]"
)


def parse_bbox(text: str, order: str = "xyxy") -> BBox:
    """Pull the first bracketed 4-integer group out of free-form text."""
    if order not in ("xyxy", "xxyy"):
        raise ValidationError(f"unknown bbox order '{order}'")
    match = _BRACKETED.search(text)
    if match is None:
        raise ParseError(f"no bracketed bbox in reply: {text!r}")
    a, b, c, d = (int(g) for g in match.groups())
    if order == "xxyy":
        a, b, c, d = a, c, b, d
    return BBox(a, b, c, d)


# ---------------------------------------------------------------------------
# specialist backends
# ---------------------------------------------------------------------------

def _luminance(image: np.ndarray) -> np.ndarray:
    return to_float(image) @ _LUM


def _sidecar_for(image_path) -> Path | None:
    """Ground-truth sidecar written next to forged sample images."""
    path = Path(image_path)
    for suffix in ("_reference.png", "_degraded.png", "_target.png"):
        if path.name.endswith(suffix):
            return path.with_name(path.name[: -len(suffix)] + "_meta.json")
    return None


class OracleAgentBackend:
    """Ground-truth-driven specialists for exact desk-scale verification."""

    kind = "oracle"

    def __init__(self, tau: float = 18.0 / 255.0, ncc_floor: float = 0.35):
        self.tau = float(tau)
        self.ncc_floor = float(ncc_floor)

    def detect(self, reference: np.ndarray, target: np.ndarray,
               target_path=None) -> BBox:
        """Largest 4-connected blob of smoothed per-channel differences."""
        ref = to_float(reference)
        tgt = to_float(target)
        if ref.shape != tgt.shape:
            raise ValidationError(
                f"detector needs aligned images, got {ref.shape} vs {tgt.shape}"
            )
        diff = ndimage.uniform_filter(np.abs(ref - tgt), size=(3, 3, 1))
        hot = diff.max(axis=2) > self.tau
        if not hot.any():
            raise NotFoundError("no inconsistency found")
        labels, count = ndimage.label(hot)
        sizes = ndimage.sum_labels(hot, labels, index=np.arange(1, count + 1))
        best = int(np.argmax(sizes)) + 1
        ys, xs = np.nonzero(labels == best)
        return BBox(int(xs.min()), int(ys.min()),
                    int(xs.max()) + 1, int(ys.max()) + 1)

    def find_reference(self, problem_crop: np.ndarray,
                       reference: np.ndarray) -> BBox:
        """Best zero-mean NCC placement of the crop inside the reference."""
        crop_l = _luminance(problem_crop)
        ref_l = _luminance(reference)
        h, w = crop_l.shape
        if h > ref_l.shape[0] or w > ref_l.shape[1]:
            raise ValidationError(
                f"crop {h}x{w} larger than reference {ref_l.shape}"
            )
        centered = crop_l - crop_l.mean()
        crop_energy = float((centered ** 2).sum())
        if crop_energy < 1e-12:
            raise NotFoundError("no match")
        windows = sliding_window_view(ref_l, (h, w))
        win_centered = windows - windows.mean(axis=(2, 3), keepdims=True)
        num = (win_centered * centered).sum(axis=(2, 3))
        den = np.sqrt((win_centered ** 2).sum(axis=(2, 3)) * crop_energy)
        corr = np.divide(num, den, out=np.zeros_like(num),
                         where=den > 1e-12)
        y, x = np.unravel_index(int(np.argmax(corr)), corr.shape)
        if corr[y, x] < self.ncc_floor:
            raise NotFoundError("no match")
        return BBox(int(x), int(y), int(x) + w, int(y) + h)

    def ground_tag(self, image: np.ndarray, tag: str, image_path=None) -> BBox:
        """Look the tag up in the forged sample's sidecar metadata."""
        if not tag:
            raise ValidationError("tag must be non-empty")
        sidecar = _sidecar_for(image_path) if image_path else None
        if sidecar is None or not sidecar.exists():
            raise NotFoundError("tag not found")
        meta = json.loads(sidecar.read_text())
        if meta.get("tag") != tag:
            raise NotFoundError("tag not found")
        x0, y0, w, h = meta["rect"]
        return BBox(x0, y0, x0 + w, y0 + h)


class RemoteAgentBackend:
    """Vision specialists answered by a chat endpoint."""

    kind = "remote"

    def __init__(self, client: ChatClient, find_order: str = "xyxy"):
        if find_order not in ("xyxy", "xxyy"):
            raise ValidationError(f"unknown bbox order '{find_order}'")
        self.client = client
        self.find_order = find_order

    def _boxed_reply(self, parts, order: str) -> BBox:
        reply = self.client.chat([user_message(*parts)])
        try:
            return parse_bbox(reply, order)
        except ParseError as exc:
            raise BackendError(f"unusable bbox reply: {reply!r}") from exc

    def detect(self, reference: np.ndarray, target: np.ndarray,
               target_path=None) -> BBox:
        return self._boxed_reply([
            text_part("Reference Image1 (correct version)"),
            image_part(reference),
            text_part("Target Image2 (may have defects)"),
            image_part(target),
            text_part(DETECT_PROMPT),
        ], "xyxy")

    def find_reference(self, problem_crop: np.ndarray,
                       reference: np.ndarray) -> BBox:
        return self._boxed_reply([
            text_part("image1 (problem region)"),
            image_part(problem_crop),
            text_part("Reference image2"),
            image_part(reference),
            text_part(FIND_PROMPT),
        ], self.find_order)

    def ground_tag(self, image: np.ndarray, tag: str, image_path=None) -> BBox:
        if not tag:
            raise ValidationError("tag must be non-empty")
        return self._boxed_reply([
            text_part(f"Image to search product tag: {tag}"),
            image_part(image),
            text_part(ground_prompt(tag)),
        ], "xyxy")


# ---------------------------------------------------------------------------
# critic invocation
# ---------------------------------------------------------------------------

def critic_correct(model, flags, reference: np.ndarray, target: np.ndarray,
                   bbox_ref: BBox, bbox_tgt: BBox, tag: str,
                   steps: int = 8, seed: int = 0, n_avg: int = 1) -> np.ndarray:
    """Repaint the target box from (reference crop, target crop) conditions.

    Both crops are letterboxed to the model resolution, the sampled
    patch is un-letterboxed back to the exact target-box geometry, and
    every pixel outside the box is returned bit-unchanged. With n_avg > 1
    the repaint averages that many independently seeded samples, which
    approximates the posterior mean and trades diversity for accuracy.
    """
    h, w = target.shape[:2]
    bbox_tgt.clamp_check(w, h)
    rh, rw = reference.shape[:2]
    bbox_ref.clamp_check(rw, rh)
    cfg = model.cfg
    ref_crop = crop(reference, bbox_ref.xmin, bbox_ref.ymin,
                    bbox_ref.xmax, bbox_ref.ymax)
    inp_crop = crop(target, bbox_tgt.xmin, bbox_tgt.ymin,
                    bbox_tgt.xmax, bbox_tgt.ymax)
    ref_sq, _ = letterbox(ref_crop, cfg.image_side)
    inp_sq, inp_meta = letterbox(inp_crop, cfg.image_side)
    prompt = model.encode_prompt(tag)
    if flags.with_de:
        prompt = model.detail_encoder_fuse(
            prompt,
            model.embed_image(to_float(ref_sq)),
            model.embed_image(to_float(inp_sq)),
        )
    ref_tokens = ad.Tensor(patchify(to_float(ref_sq), cfg.patch))
    inp_tokens = ad.Tensor(patchify(to_float(inp_sq), cfg.patch))
    if int(n_avg) < 1:
        raise ValidationError(f"n_avg must be >= 1, got {n_avg}")
    acc = None
    for k in range(int(n_avg)):
        # single-sample runs keep the historical seed derivation
        key = [seed, 2] if int(n_avg) == 1 else [seed, 2, k]
        rng = np.random.default_rng(key)
        z = sample(model, prompt, ref_tokens, inp_tokens, steps, rng)
        acc = z if acc is None else acc + z
    z = acc / float(n_avg)
    if not np.isfinite(z).all():
        raise NumericError("sampled latent is not finite")
    square = to_uint8(np.clip(unpatchify(z, cfg.image_side, cfg.patch), 0.0, 1.0))
    patch_img = unletterbox(square, inp_meta)
    return paste(target, patch_img, bbox_tgt.xmin, bbox_tgt.ymin)


def generate_correction(model, flags, reference: np.ndarray,
                        current: np.ndarray, tag: str,
                        steps: int = 8, seed: int = 0,
                        n_avg: int = 1) -> np.ndarray:
    """Whole-frame critic run used by dataset enhancement."""
    h, w = current.shape[:2]
    rh, rw = reference.shape[:2]
    return critic_correct(model, flags, reference, current,
                          BBox(0, 0, rw, rh), BBox(0, 0, w, h),
                          tag, steps=steps, seed=seed, n_avg=n_avg)


def make_critic_fn(ckpt_path, steps: int = 8, n_avg: int = 1):
    """Load a checkpoint once and return the coordinator's critic hook."""
    from .checkpoint import load_checkpoint

    model, flags, _, _ = load_checkpoint(ckpt_path)

    def critic_fn(reference, target, bbox_ref, bbox_tgt, tag, seed):
        return critic_correct(model, flags, reference, target,
                              bbox_ref, bbox_tgt, tag, steps=steps, seed=seed,
                              n_avg=n_avg)

    return critic_fn


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------

STATES = ("Detect", "AwaitDetectReview", "FindRef", "AwaitRefReview",
          "Correct", "AwaitCorrectReview", "Done", "Failed")

REVIEW_STEP = {
    "AwaitDetectReview": "detect",
    "AwaitRefReview": "find_ref",
    "AwaitCorrectReview": "correct",
}

# every lawful (from, to) pair; review gates may hold (self-loop) on reject
ALLOWED_TRANSITIONS = {
    ("Detect", "AwaitDetectReview"),
    ("AwaitDetectReview", "FindRef"),
    ("FindRef", "AwaitRefReview"),
    ("AwaitRefReview", "Correct"),
    ("Correct", "AwaitCorrectReview"),
    ("AwaitCorrectReview", "Done"),
} | {(state, "Failed") for state in STATES if state not in ("Done", "Failed")}


@dataclass
class Decision:
    """A review verdict, optionally carrying a reject override."""

    verdict: str
    bbox: BBox | None = None
    tag: str | None = None

    def __post_init__(self):
        if self.verdict not in ("accept", "reject"):
            raise ValidationError(f"unknown verdict '{self.verdict}'")
        if self.verdict == "accept" and (self.bbox or self.tag):
            raise ValidationError("overrides are only valid with reject")
        if self.bbox is not None and self.tag is not None:
            raise ValidationError("give a bbox or a tag override, not both")

    @classmethod
    def from_line(cls, line: str) -> "Decision":
        """Parse one scripted decision: accept | reject [bbox x,y,x,y | tag W]."""
        words = line.strip().split()
        if not words:
            raise ParseError("empty decision line")
        if words[0] == "accept" and len(words) == 1:
            return cls("accept")
        if words[0] != "reject":
            raise ParseError(f"unknown decision {line!r}")
        if len(words) == 1:
            return cls("reject")
        if words[1] == "bbox" and len(words) == 3:
            coords = words[2].split(",")
            if len(coords) != 4:
                raise ParseError(f"bbox override needs 4 coordinates: {line!r}")
            try:
                vals = [int(c) for c in coords]
            except ValueError as exc:
                raise ParseError(f"non-integer bbox override: {line!r}") from exc
            return cls("reject", bbox=BBox.from_seq(vals))
        if words[1] == "tag" and len(words) == 3:
            return cls("reject", tag=words[2])
        raise ParseError(f"unknown decision {line!r}")


@dataclass
class AgentSession:
    """One workflow instance: images, boxes, verdicts, and the event log."""

    id: str
    image_ref: str
    image_tgt: str
    state: str = "Detect"
    bbox_tgt: BBox | None = None
    bbox_ref: BBox | None = None
    tag: str = "object"
    corrected: str | None = None
    revision: int = 0
    critic_runs: int = 0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "image_tgt": self.image_tgt,
            "state": self.state,
            "bbox_tgt": self.bbox_tgt.to_list() if self.bbox_tgt else None,
            "bbox_ref": self.bbox_ref.to_list() if self.bbox_ref else None,
            "tag": self.tag,
            "corrected": self.corrected,
            "revision": self.revision,
            "critic_runs": self.critic_runs,
            "history": self.history,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSession":
        return cls(
            id=d["id"], image_ref=d["image_ref"], image_tgt=d["image_tgt"],
            state=d["state"],
            bbox_tgt=BBox.from_seq(d["bbox_tgt"]) if d["bbox_tgt"] else None,
            bbox_ref=BBox.from_seq(d["bbox_ref"]) if d["bbox_ref"] else None,
            tag=d["tag"], corrected=d["corrected"], revision=d["revision"],
            critic_runs=d["critic_runs"], history=list(d["history"]),
        )


class SessionStore:
    """Serializes every session's transitions and persists them atomically."""

    def __init__(self, root, backend=None, critic_fn=None, steps: int = 8,
                 seed: int = 0, persist: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.backend = backend or OracleAgentBackend()
        self.critic_fn = critic_fn
        self.steps = int(steps)
        self.seed = int(seed)
        self.persist = bool(persist)
        self._memory: dict[str, AgentSession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()

    # -- plumbing ----------------------------------------------------------

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.json"

    def _save(self, session: AgentSession) -> None:
        self._memory[session.id] = session
        if not self.persist:
            return
        path = self._path(session.id)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(session.to_json())
        os.replace(tmp, path)

    def load(self, session_id: str) -> AgentSession:
        if self.persist:
            path = self._path(session_id)
            if not path.exists():
                raise NotFoundError(f"no session {session_id}")
            return AgentSession.from_dict(json.loads(path.read_text()))
        if session_id not in self._memory:
            raise NotFoundError(f"no session {session_id}")
        return self._memory[session_id]

    def list_ids(self) -> list[str]:
        if self.persist:
            return sorted(p.stem for p in self.root.glob("*.json"))
        return sorted(self._memory)

    def _log(self, session: AgentSession, **event) -> None:
        session.history.append(dict(sorted(event.items())))

    def _move(self, session: AgentSession, state: str) -> None:
        if (session.state, state) not in ALLOWED_TRANSITIONS:
            raise ProtocolError(
                f"illegal transition {session.state} -> {state}"
            )
        self._log(session, actor="coordinator", action="state",
                  frm=session.state, to=state)
        session.state = state

    def _fail(self, session: AgentSession, step: str, error: Exception) -> None:
        self._log(session, actor="agent", action="fail", step=step,
                  error=str(error))
        self._move(session, "Failed")

    # -- agent steps -------------------------------------------------------

    def _images(self, session: AgentSession) -> tuple[np.ndarray, np.ndarray]:
        return load_image(session.image_ref), load_image(session.image_tgt)

    def _run_detect(self, session: AgentSession) -> None:
        reference, target = self._images(session)
        try:
            box = self.backend.detect(reference, target,
                                      target_path=session.image_tgt)
        except (NotFoundError, BackendError, ParseError) as exc:
            self._fail(session, "detect", exc)
            return
        session.bbox_tgt = box
        self._log(session, actor="agent", action="propose", step="detect",
                  bbox=box.to_list())
        self._move(session, "AwaitDetectReview")

    def _run_find(self, session: AgentSession) -> None:
        self._move(session, "FindRef")
        reference, target = self._images(session)
        problem = crop(target, session.bbox_tgt.xmin, session.bbox_tgt.ymin,
                       session.bbox_tgt.xmax, session.bbox_tgt.ymax)
        try:
            box = self.backend.find_reference(problem, reference)
        except (NotFoundError, BackendError, ParseError) as exc:
            self._fail(session, "find_ref", exc)
            return
        session.bbox_ref = box
        self._log(session, actor="agent", action="propose", step="find_ref",
                  bbox=box.to_list())
        self._move(session, "AwaitRefReview")

    def _run_correct(self, session: AgentSession, reenter: bool = False) -> None:
        if not reenter:
            self._move(session, "Correct")
        if self.critic_fn is None:
            self._fail(session, "correct", BackendError("no critic configured"))
            return
        reference, target = self._images(session)
        run_seed = self.seed + session.critic_runs
        session.critic_runs += 1
        try:
            corrected = self.critic_fn(reference, target, session.bbox_ref,
                                       session.bbox_tgt, session.tag, run_seed)
        except (BackendError, NumericError, ValidationError) as exc:
            self._fail(session, "correct", exc)
            return
        blob = encode_png(corrected)
        name = f"{session.id}_corrected.png"
        if self.persist:
            (self.root / name).write_bytes(blob)
        session.corrected = name
        self._log(session, actor="agent", action="propose", step="correct",
                  digest=sha256(blob).hexdigest(), seed=run_seed)
        if not reenter:
            self._move(session, "AwaitCorrectReview")

    # -- public API --------------------------------------------------------

    def create(self, image_ref, image_tgt, tag: str = "object",
               session_id: str | None = None) -> AgentSession:
        session_id = session_id or uuid.uuid4().hex[:12]
        with self._lock_for(session_id):
            if self.persist and self._path(session_id).exists():
                raise ValidationError(f"session {session_id} already exists")
            session = AgentSession(id=session_id, image_ref=str(image_ref),
                                   image_tgt=str(image_tgt), tag=tag or "object")
            self._run_detect(session)
            session.revision += 1
            self._save(session)
            return session

    def decide(self, session_id: str, decision: Decision,
               expected_revision: int | None = None) -> AgentSession:
        with self._lock_for(session_id):
            session = self.load(session_id)
            if expected_revision is not None \
                    and expected_revision != session.revision:
                raise ProtocolError(
                    f"stale decision for revision {expected_revision}; "
                    f"session is at revision {session.revision}"
                )
            if session.state not in REVIEW_STEP:
                raise ProtocolError(
                    f"no decision expected in state {session.state}"
                )
            step = REVIEW_STEP[session.state]
            if decision.verdict == "accept":
                self._log(session, actor="user", action="accept", step=step)
                if step == "detect":
                    self._run_find(session)
                elif step == "find_ref":
                    self._run_correct(session)
                else:
                    self._log(session, actor="coordinator", action="complete",
                              message=COMPLETION_MESSAGE)
                    self._move(session, "Done")
            else:
                self._apply_reject(session, step, decision)
            session.revision += 1
            self._save(session)
            return session

    def _apply_reject(self, session: AgentSession, step: str,
                      decision: Decision) -> None:
        reference, target = self._images(session)
        if decision.bbox is not None:
            # user boxes carry the highest priority at every gate
            if step == "find_ref":
                decision.bbox.clamp_check(reference.shape[1], reference.shape[0])
                session.bbox_ref = decision.bbox
            else:
                decision.bbox.clamp_check(target.shape[1], target.shape[0])
                session.bbox_tgt = decision.bbox
            self._log(session, actor="user", action="reject", step=step,
                      bbox=decision.bbox.to_list())
            if step == "correct":
                self._run_correct(session, reenter=True)
        elif decision.tag is not None:
            session.tag = decision.tag
            self._log(session, actor="user", action="reject", step=step,
                      tag=decision.tag)
            image, path = ((reference, session.image_ref)
                           if step == "find_ref" else (target, session.image_tgt))
            try:
                box = self.backend.ground_tag(image, decision.tag,
                                              image_path=path)
            except (NotFoundError, BackendError, ParseError) as exc:
                # hold at the gate; the user can still supply a box
                self._log(session, actor="agent", action="ground-fail",
                          step=step, error=str(exc))
                return
            if step == "find_ref":
                session.bbox_ref = box
            else:
                session.bbox_tgt = box
            self._log(session, actor="agent", action="ground", step=step,
                      bbox=box.to_list())
            if step == "correct":
                self._run_correct(session, reenter=True)
        else:
            self._log(session, actor="user", action="reject", step=step)

    def artifact(self, session_id: str, name: str) -> bytes:
        """PNG bytes for a named session image."""
        session = self.load(session_id)
        if name == "ref":
            return encode_png(load_image(session.image_ref))
        if name == "tgt":
            return encode_png(load_image(session.image_tgt))
        if name == "crop_ref":
            if session.bbox_ref is None:
                raise NotFoundError("no reference box yet")
            img = load_image(session.image_ref)
            b = session.bbox_ref
            return encode_png(crop(img, b.xmin, b.ymin, b.xmax, b.ymax))
        if name == "crop_tgt":
            if session.bbox_tgt is None:
                raise NotFoundError("no target box yet")
            img = load_image(session.image_tgt)
            b = session.bbox_tgt
            return encode_png(crop(img, b.xmin, b.ymin, b.xmax, b.ymax))
        if name == "corrected":
            if session.corrected is None:
                raise NotFoundError("no corrected image yet")
            path = self.root / session.corrected
            if not path.exists():
                raise NotFoundError("corrected image not persisted")
            return path.read_bytes()
        raise NotFoundError(f"unknown artifact '{name}'")


def run_critic(session: AgentSession, ckpt_path, steps: int = 8,
               seed: int = 0) -> np.ndarray:
    """One-shot critic run over a session's boxes, outside the coordinator."""
    if session.bbox_ref is None or session.bbox_tgt is None or not session.tag:
        raise ValidationError("critic needs bbox_ref, bbox_tgt, and a tag")
    fn = make_critic_fn(ckpt_path, steps=steps)
    reference = load_image(session.image_ref)
    target = load_image(session.image_tgt)
    return fn(reference, target, session.bbox_ref, session.bbox_tgt,
              session.tag, seed)


def detect_inconsistency(reference: np.ndarray, target: np.ndarray,
                         backend=None) -> BBox:
    """Standalone detector call used by evaluation sweeps."""
    backend = backend or OracleAgentBackend()
    return backend.detect(reference, target)


def find_reference(problem_crop: np.ndarray, reference: np.ndarray,
                   backend=None) -> BBox:
    backend = backend or OracleAgentBackend()
    return backend.find_reference(problem_crop, reference)


def ground_tag(image: np.ndarray, tag: str, backend=None,
               image_path=None) -> BBox:
    backend = backend or OracleAgentBackend()
    return backend.ground_tag(image, tag, image_path=image_path)


def save_corrected(session: AgentSession, image: np.ndarray, root) -> str:
    """Persist a corrected frame next to the session file."""
    name = f"{session.id}_corrected.png"
    save_image(Path(root) / name, image)
    return name
