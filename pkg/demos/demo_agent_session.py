"""Run the full correction workflow: detect, find reference, correct.

A session walks a fixed state machine. Each agent step proposes a result
and parks the session at a human review gate; an accept advances, a
reject with an override (a box or a tag) replays the step under the
reviewer's values. This demo scripts the reviewer, first accepting
everything, then rejecting the detected box to show the override path.
"""

import tempfile
from pathlib import Path

from icforge.agents import BBox, Decision, SessionStore, make_critic_fn
from icforge.checkpoint import TrainFlags, save_checkpoint
from icforge.dataforge import forge_dataset
from icforge.model import CriticModel, ModelConfig
from icforge.objectives import Adam, run_training

from demo_train_and_resume import load_items


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="agent_demo_"))
    manifest = forge_dataset(root / "data", n=6, seed=21)
    items = load_items(root / "data", manifest)

    # A briefly trained critic is enough to drive the workflow end to end.
    cfg = ModelConfig(image_side=32, patch=4, d=32, heads=4, n_double=2,
                      n_single=1, d_t=32, d_c=16, seed=9)
    model = CriticModel(cfg)
    run_training(model, items, steps=30, opt=Adam(lr=1e-3), seed=1)
    ckpt = root / "critic.ckpt"
    save_checkpoint(ckpt, model, TrainFlags(), step=30)

    rec = manifest.records[0]
    store = SessionStore(root / "sessions",
                         critic_fn=make_critic_fn(ckpt, steps=8), seed=4)
    session = store.create(root / "data" / rec.files["reference"],
                           root / "data" / rec.files["degraded"],
                           tag=rec.tag)
    print(f"session {session.id} opened at state {session.state}")
    print(f"detector proposed bbox {session.bbox_tgt.to_list()}")

    # Reviewer one: accept every gate.
    while session.state not in ("Done", "Failed"):
        session = store.decide(session.id, Decision("accept"),
                               expected_revision=session.revision)
        print(f"  accept -> {session.state}")
    print(f"corrected image: {session.corrected}")
    final = [e for e in session.history if e.get("action") == "complete"]
    print(f"completion message: {final[0]['message']!r}")

    # Reviewer two: reject the detection with an override box; the session
    # must adopt the reviewer's box verbatim before moving on.
    session2 = store.create(root / "data" / rec.files["reference"],
                            root / "data" / rec.files["degraded"],
                            tag=rec.tag)
    override = BBox(4, 4, 20, 20)
    session2 = store.decide(session2.id, Decision("reject", bbox=override))
    print(f"reject with {override.to_list()} -> state {session2.state}, "
          f"bbox_tgt {session2.bbox_tgt.to_list()}")
    while session2.state not in ("Done", "Failed"):
        session2 = store.decide(session2.id, Decision("accept"))
    print(f"override session finished at {session2.state} after "
          f"{len(session2.history)} events")


if __name__ == "__main__":
    main()
