"""Toy multi-modal diffusion transformer for consistency correction.

The model predicts a flow-matching velocity for a noised target image
conditioned on a text prompt and two condition images (the reference
and the degraded input). Target tokens run through their own parameter
stream in the first blocks while text and condition tokens share a
second stream; attention is joint across everything. Later blocks share
one parameter set over the concatenated sequence.

Double-stream blocks also record the raw condition-to-target attention
logits, head averaged and unsoftmaxed, which the alignment objective
consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError, ValidationError

# ---------------------------------------------------------------------------
# vocabulary and prompt template
# ---------------------------------------------------------------------------

PROMPT_TEMPLATE = (
    "Use the {object} in IMG1 as a reference to be corrected, replace, "
    "or enhance the {object} in IMG2."
)

UNK_ID = 0
IMG1_ID = 1
IMG2_ID = 2

_RESERVED = ("<unk>", "IMG1", "IMG2")
_TEMPLATE_WORDS = (
    "use", "the", "in", "as", "a", "reference", "to", "be",
    "corrected", "replace", "or", "enhance",
)
NOUNS = (
    "badge", "bottle", "box", "can", "card", "case", "clock", "cup",
    "fan", "hat", "jar", "kit", "lamp", "mug", "pack", "pen",
)
VOCAB = _RESERVED + _TEMPLATE_WORDS + NOUNS
_VOCAB_INDEX = {word: i for i, word in enumerate(VOCAB)}


def prompt_text(tag: str) -> str:
    """The exact instruction string used for training and inference."""
    if not isinstance(tag, str) or not tag.strip():
        raise ValidationError("prompt tag must be a non-empty string")
    return PROMPT_TEMPLATE.format(object=tag.strip())


def tokenize_prompt(tag: str) -> tuple[tuple[int, ...], dict[str, int]]:
    """Token ids for the instruction plus the two trigger positions."""
    tag_words = tag.strip().lower().split()
    if not tag_words:
        raise ValidationError("prompt tag must be a non-empty string")
    words: list[str] = ["use", "the", *tag_words, "in", "IMG1", "as", "a",
                        "reference", "to", "be", "corrected", "replace", "or",
                        "enhance", "the", *tag_words, "in", "IMG2"]
    ids = tuple(_VOCAB_INDEX.get(w, UNK_ID) for w in words)
    triggers = {"ref": ids.index(IMG1_ID), "inp": ids.index(IMG2_ID)}
    if ids.count(IMG1_ID) != 1 or ids.count(IMG2_ID) != 1:
        raise ValidationError("each trigger token must occur exactly once")
    return ids, triggers


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    image_side: int = 32
    patch: int = 4
    d: int = 64
    heads: int = 4
    n_double: int = 2
    n_single: int = 2
    d_t: int = 64
    d_c: int = 32
    vocab: int = len(VOCAB)
    max_text: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.image_side <= 0 or self.patch <= 0:
            raise ValidationError("image_side and patch must be positive")
        if self.image_side % self.patch != 0:
            raise ValidationError(
                f"patch {self.patch} must divide image_side {self.image_side}"
            )
        if self.d % self.heads != 0:
            raise ValidationError(f"heads {self.heads} must divide width {self.d}")
        if self.n_double < 1:
            raise ValidationError("need at least one double-stream block")
        if self.vocab < len(_RESERVED):
            raise ValidationError("vocabulary cannot drop the reserved tokens")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def d_latent(self) -> int:
        return self.patch * self.patch * 3

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side, "patch": self.patch, "d": self.d,
            "heads": self.heads, "n_double": self.n_double,
            "n_single": self.n_single, "d_t": self.d_t, "d_c": self.d_c,
            "vocab": self.vocab, "max_text": self.max_text, "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# data carriers
# ---------------------------------------------------------------------------

@dataclass
class PromptEncoding:
    """Token ids, hidden rows, and the positions of the two triggers."""

    ids: tuple[int, ...]
    hidden: ad.Tensor
    trigger_pos: dict[str, int]

    def __post_init__(self):
        if self.hidden.data.shape[0] != len(self.ids):
            raise DimensionError("hidden row count must equal token count")


@dataclass
class ImageEmbedding:
    vec: ad.Tensor
    source: str = ""


@dataclass
class TokenStream:
    """Joint sequence plus the row ranges of its four segments."""

    tokens: ad.Tensor
    segments: dict[str, tuple[int, int]]

    def __post_init__(self):
        order = ["target", "text", "ref_cond", "inp_cond"]
        present = [k for k in order if k in self.segments]
        cursor = 0
        for key in present:
            lo, hi = self.segments[key]
            if lo != cursor or hi < lo:
                raise DimensionError("segments must be ordered, disjoint, covering")
            cursor = hi
        if cursor != self.tokens.data.shape[0]:
            raise DimensionError("segments must cover the whole sequence")


@dataclass
class AttentionRecord:
    """Head-averaged pre-softmax condition-to-target maps per double block."""

    ref_maps: list[ad.Tensor] = field(default_factory=list)
    inp_maps: list[ad.Tensor] = field(default_factory=list)


def extract_attention(q_cond: ad.Tensor, k_tgt: ad.Tensor) -> ad.Tensor:
    """Raw logit map q k^T / sqrt(d_head) for one head."""
    if q_cond.data.ndim != 2 or k_tgt.data.ndim != 2:
        raise DimensionError("extract_attention expects matrices")
    if q_cond.data.shape[1] != k_tgt.data.shape[1]:
        raise DimensionError("query and key head widths differ")
    return ad.scale(ad.matmul(q_cond, ad.transpose(k_tgt)),
                    1.0 / math.sqrt(q_cond.data.shape[1]))


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) float image to (n_patches, patch*patch*3), row-major grid."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3), got {image.shape}")
    h, w, c = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"patch {patch} must tile image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, side: int, patch: int) -> np.ndarray:
    """Exact inverse of patchify for square images."""
    g = side // patch
    if tokens.shape != (g * g, patch * patch * 3):
        raise DimensionError(f"token tensor {tokens.shape} does not match side/patch")
    x = tokens.reshape(g, g, patch, patch, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(side, side, 3)


def sinusoidal_time(t: float, d: int) -> np.ndarray:
    """Fixed sin/cos features of the flow time in [0, 1]."""
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs * 1000.0
    out = np.zeros(d)
    out[:half] = np.sin(ang)
    out[half:2 * half] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    """Dense layer, optionally carrying an unmerged low-rank adapter."""

    def __init__(self, w: ad.Tensor, b: ad.Tensor):
        self.w = w
        self.b = b
        self.lora_down: ad.Tensor | None = None
        self.lora_up: ad.Tensor | None = None
        self.lora_scale: float = 1.0

    @classmethod
    def build(cls, rng: np.random.Generator, d_in: int, d_out: int,
              std: float = 0.02) -> "Linear":
        w = ad.Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)
        b = ad.Tensor(np.zeros(d_out), requires_grad=True)
        return cls(w, b)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        y = ad.linear(x, self.w, self.b)
        if self.lora_down is not None:
            delta = ad.matmul(ad.matmul(x, self.lora_down), self.lora_up)
            y = ad.add(y, ad.scale(delta, self.lora_scale))
        return y


def lora_wrap(layer: Linear, rank: int, scale: float,
              rng: np.random.Generator | None = None) -> Linear:
    """Attach a low-rank residual; up starts at zero so the wrap is a no-op."""
    d_in, d_out = layer.w.data.shape
    if not (1 <= rank <= min(d_in, d_out)):
        raise ValidationError(f"rank {rank} invalid for a {d_in}x{d_out} layer")
    rng = rng or np.random.default_rng(0)
    layer.lora_down = ad.Tensor(rng.normal(0.0, 0.02, size=(d_in, rank)),
                                requires_grad=True)
    layer.lora_up = ad.Tensor(np.zeros((rank, d_out)), requires_grad=True)
    layer.lora_scale = float(scale)
    return layer


def lora_merge(layer: Linear) -> Linear:
    """Fold the adapter into the base weight and drop it."""
    if layer.lora_down is None:
        return layer
    layer.w.data = layer.w.data + layer.lora_scale * (
        layer.lora_down.data @ layer.lora_up.data
    )
    layer.lora_down = None
    layer.lora_up = None
    layer.lora_scale = 1.0
    return layer


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class CriticModel:
    """Flow-velocity predictor with attention recording and a detail encoder."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, ad.Tensor] = {}
        self.linears: dict[str, Linear] = {}
        self.lora_rank = 0
        self.lora_scale = 1.0
        rng = np.random.default_rng(cfg.seed)

        def reg(name: str, arr, grad: bool = True) -> ad.Tensor:
            t = ad.Tensor(arr, requires_grad=grad)
            self.params[name] = t
            return t

        def lin(name: str, d_in: int, d_out: int) -> Linear:
            layer = Linear.build(rng, d_in, d_out)
            self.linears[name] = layer
            self.params[name + ".w"] = layer.w
            self.params[name + ".b"] = layer.b
            return layer

        n, d = cfg.n_patches, cfg.d
        reg("text_emb", rng.normal(0.0, 0.02, size=(cfg.vocab, cfg.d_t)))
        reg("pos_tgt", rng.normal(0.0, 0.02, size=(n, d)))
        reg("pos_text", rng.normal(0.0, 0.02, size=(cfg.max_text, d)))
        reg("pos_ref", rng.normal(0.0, 0.02, size=(n, d)))
        reg("pos_inp", rng.normal(0.0, 0.02, size=(n, d)))
        lin("tgt_proj", cfg.d_latent, d)
        lin("cond_proj", cfg.d_latent, d)
        lin("text_proj", cfg.d_t, d)
        lin("time_proj", d, d)
        lin("de.img_embed", cfg.n_patches * 3, cfg.d_c)
        lin("de.fc1", cfg.d_t + cfg.d_c, cfg.d_t)
        lin("de.fc2", cfg.d_t, cfg.d_t)
        for j in range(cfg.n_double):
            for stream in ("img", "txt"):
                p = f"double{j}.{stream}"
                reg(p + ".ln1_g", np.ones(d))
                reg(p + ".ln1_b", np.zeros(d))
                for w in ("wq", "wk", "wv", "wo"):
                    lin(f"{p}.{w}", d, d)
                reg(p + ".ln2_g", np.ones(d))
                reg(p + ".ln2_b", np.zeros(d))
                lin(p + ".mlp1", d, 4 * d)
                lin(p + ".mlp2", 4 * d, d)
        for j in range(cfg.n_single):
            p = f"single{j}"
            reg(p + ".ln1_g", np.ones(d))
            reg(p + ".ln1_b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                lin(f"{p}.{w}", d, d)
            reg(p + ".ln2_g", np.ones(d))
            reg(p + ".ln2_b", np.zeros(d))
            lin(p + ".mlp1", d, 4 * d)
            lin(p + ".mlp2", 4 * d, d)
        reg("head.ln_g", np.ones(d))
        reg("head.ln_b", np.zeros(d))
        lin("head.out", d, cfg.d_latent)

    # -- parameter plumbing -------------------------------------------------

    def add_adapters(self, rank: int, scale: float = 1.0,
                     targets: tuple[str, ...] | None = None) -> None:
        """Wrap block linears with low-rank adapters (deterministic init)."""
        rng = np.random.default_rng(self.cfg.seed + 1)
        names = targets if targets is not None else tuple(
            n for n in self.linears
            if n.startswith("double") or n.startswith("single")
        )
        for name in names:
            layer = self.linears[name]
            lora_wrap(layer, rank, scale, rng)
            self.params[name + ".lora_down"] = layer.lora_down
            self.params[name + ".lora_up"] = layer.lora_up
        self.lora_rank = int(rank)
        self.lora_scale = float(scale)

    def merge_adapters(self) -> None:
        for name, layer in self.linears.items():
            if layer.lora_down is not None:
                lora_merge(layer)
                del self.params[name + ".lora_down"]
                del self.params[name + ".lora_up"]
        self.lora_rank = 0
        self.lora_scale = 1.0

    def trainable_params(self, frozen_base: bool = False) -> dict[str, ad.Tensor]:
        if not frozen_base:
            return dict(self.params)
        return {
            name: p for name, p in self.params.items()
            if ".lora_" in name or name.startswith("de.")
        }

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- encoders -----------------------------------------------------------

    def encode_prompt(self, tag: str) -> PromptEncoding:
        ids, triggers = tokenize_prompt(tag)
        if len(ids) > self.cfg.max_text:
            raise ValidationError(
                f"prompt of {len(ids)} tokens exceeds max_text {self.cfg.max_text}"
            )
        hidden = ad.gather_rows(self.params["text_emb"], list(ids))
        return PromptEncoding(ids, hidden, triggers)

    def embed_image(self, image: np.ndarray, source: str = "") -> ImageEmbedding:
        """Project per-patch mean colors of a model-sized image to d_c."""
        side = self.cfg.image_side
        if image.shape != (side, side, 3):
            raise DimensionError(
                f"embed_image expects ({side}, {side}, 3), got {image.shape}"
            )
        img = image.astype(np.float64)
        if image.dtype == np.uint8:
            img = img / 255.0
        p, g = self.cfg.patch, self.cfg.grid
        pooled = img.reshape(g, p, g, p, 3).mean(axis=(1, 3)).reshape(1, g * g * 3)
        return ImageEmbedding(self.linears["de.img_embed"](ad.Tensor(pooled)), source)

    def detail_encoder_fuse(self, prompt: PromptEncoding, c_ref: ImageEmbedding,
                            c_inp: ImageEmbedding) -> PromptEncoding:
        """Replace each trigger row with an MLP of [row; image embedding]."""
        hidden = prompt.hidden
        for role, emb in (("ref", c_ref), ("inp", c_inp)):
            if emb.vec.data.shape != (1, self.cfg.d_c):
                raise DimensionError("image embedding must be a single d_c row")
            pos = prompt.trigger_pos[role]
            row = ad.slice_along(hidden, 0, pos, pos + 1)
            fused = ad.concat([row, emb.vec], axis=1)
            h = ad.gelu(self.linears["de.fc1"](fused))
            out = self.linears["de.fc2"](h)
            hidden = ad.concat([
                ad.slice_along(hidden, 0, 0, pos),
                out,
                ad.slice_along(hidden, 0, pos + 1, hidden.data.shape[0]),
            ], axis=0)
        return PromptEncoding(prompt.ids, hidden, dict(prompt.trigger_pos))

    # -- transformer --------------------------------------------------------

    def _heads_attend(self, q: ad.Tensor, k: ad.Tensor, v: ad.Tensor,
                      allowed: np.ndarray | None) -> ad.Tensor:
        dh = self.cfg.d_head
        outs = []
        for h in range(self.cfg.heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = ad.slice_along(q, 1, lo, hi)
            kh = ad.slice_along(k, 1, lo, hi)
            vh = ad.slice_along(v, 1, lo, hi)
            probs = ad.softmax_rows(extract_attention(qh, kh), allowed)
            outs.append(ad.matmul(probs, vh))
        return ad.concat(outs, axis=1)

    def _mean_head_logits(self, q: ad.Tensor, k: ad.Tensor,
                          rows: tuple[int, int], n_tgt: int) -> ad.Tensor:
        dh = self.cfg.d_head
        q_rows = ad.slice_along(q, 0, rows[0], rows[1])
        k_tgt = ad.slice_along(k, 0, 0, n_tgt)
        acc = None
        for h in range(self.cfg.heads):
            lo, hi = h * dh, (h + 1) * dh
            m = extract_attention(ad.slice_along(q_rows, 1, lo, hi),
                                  ad.slice_along(k_tgt, 1, lo, hi))
            acc = m if acc is None else ad.add(acc, m)
        return ad.scale(acc, 1.0 / self.cfg.heads)

    def _mlp(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        h = ad.gelu(self.linears[prefix + ".mlp1"](x))
        return self.linears[prefix + ".mlp2"](h)

    def _ln(self, prefix: str, which: str, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.{which}_g"],
                             self.params[f"{prefix}.{which}_b"])

    @staticmethod
    def _finite_or_raise(x: ad.Tensor, where: str) -> None:
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations in {where}")

    def forward(
        self,
        z_t: ad.Tensor,
        t: float,
        prompt: PromptEncoding | None = None,
        ref_tokens: ad.Tensor | None = None,
        inp_tokens: ad.Tensor | None = None,
        mask_conditions: bool = False,
        qk_capture: list | None = None,
    ) -> tuple[ad.Tensor, AttentionRecord]:
        """Velocity prediction plus the per-layer attention record.

        Passing no prompt and no condition tokens runs the target-only
        baseline. ``mask_conditions`` keeps condition tokens in the
        sequence but removes them from every attention distribution.
        """
        cfg = self.cfg
        n_tgt = cfg.n_patches
        if z_t.data.shape != (n_tgt, cfg.d_latent):
            raise DimensionError(
                f"z_t must be ({n_tgt}, {cfg.d_latent}), got {z_t.data.shape}"
            )
        if not (0.0 <= t <= 1.0):
            raise ValidationError(f"flow time {t} outside [0, 1]")
        has_cond = prompt is not None
        if has_cond and (ref_tokens is None or inp_tokens is None):
            raise ValidationError("conditioned forward needs both condition images")

        time_row = ad.reshape(
            self.linears["time_proj"](ad.Tensor(sinusoidal_time(t, cfg.d)[None, :])),
            (cfg.d,),
        )
        x_img = ad.add(ad.add(self.linears["tgt_proj"](z_t), time_row),
                       self.params["pos_tgt"])

        segments = {"target": (0, n_tgt)}
        x_cond = None
        if has_cond:
            m = len(prompt.ids)
            n_ref = ref_tokens.data.shape[0]
            n_inp = inp_tokens.data.shape[0]
            if ref_tokens.data.shape != (n_tgt, cfg.d_latent) or \
                    inp_tokens.data.shape != (n_tgt, cfg.d_latent):
                raise DimensionError("condition token grids must match the target")
            x_text = ad.add(self.linears["text_proj"](prompt.hidden),
                            ad.slice_along(self.params["pos_text"], 0, 0, m))
            x_ref = ad.add(self.linears["cond_proj"](ref_tokens),
                           self.params["pos_ref"])
            x_inp = ad.add(self.linears["cond_proj"](inp_tokens),
                           self.params["pos_inp"])
            x_cond = ad.concat([x_text, x_ref, x_inp], axis=0)
            segments["text"] = (n_tgt, n_tgt + m)
            segments["ref_cond"] = (n_tgt + m, n_tgt + m + n_ref)
            segments["inp_cond"] = (n_tgt + m + n_ref, n_tgt + m + n_ref + n_inp)

        seq_len = n_tgt + (x_cond.data.shape[0] if has_cond else 0)
        allowed = None
        if mask_conditions and has_cond:
            allowed = np.zeros(seq_len, dtype=bool)
            allowed[:n_tgt] = True

        record = AttentionRecord()
        for j in range(cfg.n_double):
            pi, pt = f"double{j}.img", f"double{j}.txt"
            a = self._ln(pi, "ln1", x_img)
            if has_cond:
                b = self._ln(pt, "ln1", x_cond)
                q = ad.concat([self.linears[pi + ".wq"](a),
                               self.linears[pt + ".wq"](b)], axis=0)
                k = ad.concat([self.linears[pi + ".wk"](a),
                               self.linears[pt + ".wk"](b)], axis=0)
                v = ad.concat([self.linears[pi + ".wv"](a),
                               self.linears[pt + ".wv"](b)], axis=0)
                if not mask_conditions:
                    record.ref_maps.append(
                        self._mean_head_logits(q, k, segments["ref_cond"], n_tgt))
                    record.inp_maps.append(
                        self._mean_head_logits(q, k, segments["inp_cond"], n_tgt))
                    if qk_capture is not None:
                        qk_capture.append(
                            {"layer": j, "q": q.data.copy(), "k": k.data.copy()})
            else:
                q = self.linears[pi + ".wq"](a)
                k = self.linears[pi + ".wk"](a)
                v = self.linears[pi + ".wv"](a)
            joint = self._heads_attend(q, k, v, allowed)
            att_img = self.linears[pi + ".wo"](ad.slice_along(joint, 0, 0, n_tgt))
            x_img = ad.add(x_img, att_img)
            x_img = ad.add(x_img, self._mlp(pi, self._ln(pi, "ln2", x_img)))
            self._finite_or_raise(x_img, f"double block {j}")
            if has_cond:
                att_cond = self.linears[pt + ".wo"](
                    ad.slice_along(joint, 0, n_tgt, seq_len))
                x_cond = ad.add(x_cond, att_cond)
                x_cond = ad.add(x_cond, self._mlp(pt, self._ln(pt, "ln2", x_cond)))
                self._finite_or_raise(x_cond, f"double block {j}")

        joined = ad.concat([x_img, x_cond], axis=0) if has_cond else x_img
        x = TokenStream(joined, segments).tokens
        for j in range(cfg.n_single):
            p = f"single{j}"
            a = self._ln(p, "ln1", x)
            q = self.linears[p + ".wq"](a)
            k = self.linears[p + ".wk"](a)
            v = self.linears[p + ".wv"](a)
            att = self.linears[p + ".wo"](self._heads_attend(q, k, v, allowed))
            x = ad.add(x, att)
            x = ad.add(x, self._mlp(p, self._ln(p, "ln2", x)))
            self._finite_or_raise(x, f"single block {j}")

        tgt = ad.slice_along(x, 0, 0, n_tgt)
        tgt = ad.layer_norm(tgt, self.params["head.ln_g"], self.params["head.ln_b"])
        velocity = self.linears["head.out"](tgt)
        self._finite_or_raise(velocity, "output head")
        return velocity, record


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample(
    model: CriticModel,
    prompt: PromptEncoding | None,
    ref_tokens: ad.Tensor | None,
    inp_tokens: ad.Tensor | None,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Euler-integrate the learned velocity from noise back to a sample."""
    if steps < 1:
        raise ValidationError("sampling needs at least one step")
    cfg = model.cfg
    z = rng.standard_normal((cfg.n_patches, cfg.d_latent))
    for i in range(steps, 0, -1):
        t = i / steps
        vel, _ = model.forward(ad.Tensor(z), t, prompt, ref_tokens, inp_tokens)
        z = z - vel.data / steps
    return z
