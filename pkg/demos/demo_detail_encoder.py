"""Show how the detail encoder injects image identity into the prompt.

Prompts are short tag templates with two trigger tokens, one for the
reference image and one for the degraded input. With the detail encoder
enabled, each trigger row of the prompt hidden state is replaced by an MLP
fusion of the row with a pooled embedding of the corresponding image, so
the same prompt text carries different conditioning for different images.
With it disabled, the prompt is pure text and cannot tell references apart.
"""

import numpy as np

from icforge.dataforge import synth_scene
from icforge.imageio import to_float
from icforge.model import CriticModel, ModelConfig


def main() -> None:
    cfg = ModelConfig(image_side=32, patch=4, d=32, heads=4, n_double=2,
                      n_single=1, d_t=32, d_c=16, seed=0)
    model = CriticModel(cfg)

    scene_a = synth_scene(100)
    scene_b = synth_scene(200)
    ref_a = to_float(scene_a.reference)
    ref_b = to_float(scene_b.reference)
    degraded = to_float(scene_a.target)

    prompt = model.encode_prompt("mug")
    print(f"prompt rows: {prompt.hidden.data.shape[0]}, "
          f"trigger positions: {prompt.trigger_pos}")

    # Same prompt, two different reference images.
    fused_a = model.detail_encoder_fuse(prompt, model.embed_image(ref_a),
                                        model.embed_image(degraded))
    fused_b = model.detail_encoder_fuse(prompt, model.embed_image(ref_b),
                                        model.embed_image(degraded))

    pos = prompt.trigger_pos["ref"]
    row_a = fused_a.hidden.data[pos]
    row_b = fused_b.hidden.data[pos]
    gap = np.abs(row_a - row_b).max()
    print(f"trigger row gap across references (encoder on): {gap:.4f}")

    # Non-trigger rows are untouched by the fuse.
    keep = [i for i in range(prompt.hidden.data.shape[0])
            if i not in prompt.trigger_pos.values()]
    same = np.array_equal(fused_a.hidden.data[keep], prompt.hidden.data[keep])
    print(f"non-trigger rows identical to raw prompt: {same}")

    # With the encoder off, conditioning collapses to the text alone:
    # encoding the prompt twice gives bitwise-identical hidden states no
    # matter which images are on the desk.
    plain_a = model.encode_prompt("mug")
    plain_b = model.encode_prompt("mug")
    print(f"encoder off, hidden states identical: "
          f"{np.array_equal(plain_a.hidden.data, plain_b.hidden.data)}")


if __name__ == "__main__":
    main()
