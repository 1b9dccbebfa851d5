"""Training objectives: flow matching plus attention alignment.

The alignment term works on the recorded condition-to-target attention
maps. Each map is min-max normalized (stop-gradient bounds), multiplied
by a background indicator over the target tokens, and reduced with a
mean of squares. Reference attention is pushed off the background while
input attention is pushed off the subject; both terms combine with the
diffusion loss at unit weight.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError, ValidationError
from .imageio import letterbox
from .model import AttentionRecord, CriticModel, PromptEncoding, patchify

# ---------------------------------------------------------------------------
# token-level background mask
# ---------------------------------------------------------------------------

@dataclass
class MaskGrid:
    """Per-target-token background indicator: 1 background, 0 subject."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise DimensionError("mask grid must be rank 1 over target tokens")
        if not np.isin(self.values, (0, 1)).all():
            raise ValidationError("mask grid entries must be 0 or 1")
        self.values = self.values.astype(np.float64)

    @property
    def inverted(self) -> np.ndarray:
        return 1.0 - self.values


def make_token_mask(subject_mask: np.ndarray, patch: int) -> MaskGrid:
    """Pool a pixel subject mask to tokens; background wins ties.

    A token counts as background when the mean background share of its
    patch is at least one half.
    """
    if subject_mask.ndim != 2:
        raise DimensionError(f"subject mask must be (H, W), got {subject_mask.shape}")
    h, w = subject_mask.shape
    if h % patch or w % patch:
        raise DimensionError(f"patch {patch} must tile mask {h}x{w}")
    subject = (np.asarray(subject_mask) > 0).astype(np.float64)
    gh, gw = h // patch, w // patch
    share_bg = 1.0 - subject.reshape(gh, patch, gw, patch).mean(axis=(1, 3))
    return MaskGrid((share_bg >= 0.5).astype(np.float64).reshape(gh * gw))


# ---------------------------------------------------------------------------
# flow matching
# ---------------------------------------------------------------------------

@dataclass
class FlowSample:
    """Noised latent, its time, and the regression target velocity."""

    z_t: ad.Tensor
    t: float
    v_star: ad.Tensor


def flow_sample(z_target: np.ndarray, eps: np.ndarray, t: float) -> FlowSample:
    if not (0.0 <= t <= 1.0):
        raise ValidationError(f"flow time {t} outside [0, 1]")
    z_target = np.asarray(z_target, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z_target.shape != eps.shape:
        raise DimensionError("target latent and noise must share a shape")
    z_t = (1.0 - t) * z_target + t * eps
    return FlowSample(ad.Tensor(z_t), float(t), ad.Tensor(eps - z_target))


def diffusion_loss(velocity: ad.Tensor, v_star: ad.Tensor) -> ad.Tensor:
    return ad.mse(velocity, v_star)


# ---------------------------------------------------------------------------
# attention alignment
# ---------------------------------------------------------------------------

def attention_alignment_loss(
    record: AttentionRecord,
    mask: MaskGrid,
    frozen_bounds: list[tuple[tuple[float, float], tuple[float, float]]] | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """(reference term, input term), each averaged over double blocks.

    ``frozen_bounds`` optionally pins the per-map normalization bounds,
    one (ref, inp) pair per layer; finite-difference oracles use it.
    """
    if not record.ref_maps or len(record.ref_maps) != len(record.inp_maps):
        raise ValidationError("attention record must carry both map families")
    n_layers = len(record.ref_maps)
    bg = ad.Tensor(mask.values)
    fg = ad.Tensor(mask.inverted)
    l_ref = None
    l_inp = None
    for j in range(n_layers):
        for m in (record.ref_maps[j], record.inp_maps[j]):
            if m.data.shape[1] != mask.values.shape[0]:
                raise DimensionError(
                    "mask length must equal the target token count of the maps"
                )
        b_ref = frozen_bounds[j][0] if frozen_bounds else None
        b_inp = frozen_bounds[j][1] if frozen_bounds else None
        ref_term = ad.meansq(ad.mul(ad.minmax_normalize(record.ref_maps[j], b_ref), bg))
        inp_term = ad.meansq(ad.mul(ad.minmax_normalize(record.inp_maps[j], b_inp), fg))
        l_ref = ref_term if l_ref is None else ad.add(l_ref, ref_term)
        l_inp = inp_term if l_inp is None else ad.add(l_inp, inp_term)
    return ad.scale(l_ref, 1.0 / n_layers), ad.scale(l_inp, 1.0 / n_layers)


def record_bounds(record: AttentionRecord) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Snapshot per-layer (min, max) pairs for frozen-bounds oracles."""
    out = []
    for mr, mi in zip(record.ref_maps, record.inp_maps):
        out.append((
            (float(mr.data.min()), float(mr.data.max())),
            (float(mi.data.min()), float(mi.data.max())),
        ))
    return out


def _minmax_np(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo == 0.0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def background_attention_mass(record: AttentionRecord, mask: MaskGrid) -> float:
    """Share of reference-branch attention probability on background tokens.

    Diagnostic counterpart of the reference alignment term: for each
    double block, softmax the reference map over target tokens per
    condition row and measure the probability mass that lands on
    background tokens; average over rows and blocks. Probability mass is
    used rather than a min-max reading because the latter is invariant to
    softmax-style suppression: pushing the lowest background logit down
    moves the normalization floor with it and re-inflates the rest.
    """
    bg = mask.values.astype(float).ravel()
    masses = []
    for m in record.ref_maps:
        logits = m.data
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        masses.append(float((p * bg).sum() / p.shape[0]))
    if not masses:
        raise ValidationError("record carries no double-block maps")
    return float(np.mean(masses))


@dataclass
class LossBreakdown:
    l_diff: float
    l_ref: float
    l_inp: float
    total: float


def total_loss(l_diff: float, l_ref: float, l_inp: float) -> LossBreakdown:
    """Unit-weight combination of the three terms."""
    return LossBreakdown(float(l_diff), float(l_ref), float(l_inp),
                         float(l_diff) + float(l_ref) + float(l_inp))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a named parameter dict, with exportable moments."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ad.Tensor]) -> None:
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def export_state(self) -> dict[str, np.ndarray]:
        state = {"step_count": np.array([float(self.step_count)])}
        for name, arr in self.m.items():
            state["m." + name] = arr
        for name, arr in self.v.items():
            state["v." + name] = arr
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            if key == "step_count":
                self.step_count = int(arr.reshape(-1)[0])
            elif key.startswith("m."):
                self.m[key[2:]] = np.asarray(arr, dtype=np.float64)
            elif key.startswith("v."):
                self.v[key[2:]] = np.asarray(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One triplet prepared for the model: float images plus the mask."""

    reference: np.ndarray
    degraded: np.ndarray
    target: np.ndarray
    object_mask: np.ndarray
    tag: str


def rect_view(item: TrainItem, box: tuple[int, int, int, int],
              side: int) -> TrainItem:
    """Zoomed copy of a triplet: letterboxed crops of one rectangle.

    The box-repaint pathway feeds the model letterboxed crops at
    correction time; mixing such views into training keeps that
    geometry in distribution. The same box is cut from all three
    frames, which forged triplets guarantee is valid because the
    object sits at identical coordinates in reference and target.
    """
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 < x1 and 0 <= y0 < y1):
        raise ValidationError(f"degenerate view box {box}")

    def cut(frame: np.ndarray) -> np.ndarray:
        squeeze = frame.ndim == 2
        part = frame[y0:y1, x0:x1]
        part = part[..., None] if squeeze else part
        out, _ = letterbox(part, side)
        return out[..., 0] if squeeze else out

    return TrainItem(
        reference=cut(item.reference),
        degraded=cut(item.degraded),
        target=cut(item.target),
        object_mask=cut(item.object_mask),
        tag=item.tag,
    )


@dataclass
class StepLog:
    step: int
    losses: LossBreakdown
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "l_diff": self.losses.l_diff,
            "l_ref": self.losses.l_ref,
            "l_inp": self.losses.l_inp,
            "total": self.losses.total,
            "wall_ms": self.wall_ms,
        })


def train_step(
    model: CriticModel,
    batch: list[TrainItem],
    opt: Adam,
    rng: np.random.Generator,
    with_aal: bool = True,
    with_de: bool = True,
    frozen_base: bool = False,
    step: int = 0,
) -> StepLog:
    """One optimization step over a batch of triplets.

    Draws one flow time and one noise tensor per item from ``rng`` in a
    fixed order, so a given seed reproduces the run bit for bit.
    """
    if not batch:
        raise ValidationError("training batch must be non-empty")
    start = time.perf_counter()
    cfg = model.cfg
    params = model.trainable_params(frozen_base)
    # marking frozen leaves as constant keeps their subgraphs off the tape
    restore: list[ad.Tensor] = []
    if frozen_base:
        for name, p in model.params.items():
            if name not in params:
                p.requires_grad = False
                restore.append(p)
    acc_diff = None
    acc_ref = None
    acc_inp = None
    with ad.Tape() as tape:
        for item in batch:
            t = float(rng.uniform(0.0, 1.0))
            eps = rng.standard_normal((cfg.n_patches, cfg.d_latent))
            fs = flow_sample(patchify(item.target, cfg.patch), eps, t)
            prompt = model.encode_prompt(item.tag)
            ref_np = patchify(item.reference, cfg.patch)
            inp_np = patchify(item.degraded, cfg.patch)
            if with_de:
                prompt = model.detail_encoder_fuse(
                    prompt,
                    model.embed_image(item.reference),
                    model.embed_image(item.degraded),
                )
            vel, rec = model.forward(fs.z_t, fs.t, prompt,
                                     ad.Tensor(ref_np), ad.Tensor(inp_np))
            l_diff = diffusion_loss(vel, fs.v_star)
            acc_diff = l_diff if acc_diff is None else ad.add(acc_diff, l_diff)
            if with_aal:
                mask = make_token_mask(item.object_mask, cfg.patch)
                # a single-class view carries no alignment signal: with no
                # background tokens the input term degenerates into blanket
                # suppression of the whole map, so such items train the
                # flow objective only
                if mask.values.min() == mask.values.max():
                    continue
                l_ref, l_inp = attention_alignment_loss(rec, mask)
                acc_ref = l_ref if acc_ref is None else ad.add(acc_ref, l_ref)
                acc_inp = l_inp if acc_inp is None else ad.add(acc_inp, l_inp)
        inv = 1.0 / len(batch)
        acc_diff = ad.scale(acc_diff, inv)
        objective = acc_diff
        if with_aal and acc_ref is not None:
            acc_ref = ad.scale(acc_ref, inv)
            acc_inp = ad.scale(acc_inp, inv)
            objective = ad.add(ad.add(acc_diff, acc_ref), acc_inp)
    breakdown = total_loss(
        acc_diff.item(),
        acc_ref.item() if with_aal and acc_ref is not None else 0.0,
        acc_inp.item() if with_aal and acc_inp is not None else 0.0,
    )
    if not np.isfinite(breakdown.total):
        raise NumericError(
            f"non-finite loss at step {step}: diff={breakdown.l_diff} "
            f"ref={breakdown.l_ref} inp={breakdown.l_inp}"
        )
    model.zero_grads()
    ad.backward(tape, objective)
    for p in restore:
        p.requires_grad = True
    opt.step(params)
    model.zero_grads()
    wall_ms = (time.perf_counter() - start) * 1000.0
    return StepLog(step, breakdown, wall_ms)


def run_training(
    model: CriticModel,
    items: list[TrainItem],
    steps: int,
    opt: Adam,
    seed: int = 0,
    with_aal: bool = True,
    with_de: bool = True,
    frozen_base: bool = False,
    batch_size: int = 4,
    start_step: int = 0,
    log_fh=None,
) -> list[StepLog]:
    """Drive train_step for a fixed number of steps with seeded batching."""
    if not items:
        raise ValidationError("cannot train on an empty dataset")
    rng = np.random.default_rng([seed, start_step])
    logs = []
    take = min(batch_size, len(items))
    for s in range(start_step + 1, start_step + steps + 1):
        picks = rng.choice(len(items), size=take, replace=False)
        batch = [items[int(i)] for i in picks]
        entry = train_step(model, batch, opt, rng, with_aal=with_aal,
                           with_de=with_de, frozen_base=frozen_base, step=s)
        logs.append(entry)
        if log_fh is not None:
            log_fh.write(entry.to_json() + "\n")
    return logs
