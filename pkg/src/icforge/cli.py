"""Command-line front door wiring every capability into seeded runs.

Subcommands: forge, train, correct, agent, eval, attn-dump. Flags can
be preloaded from a JSON config file and overridden on the command
line; paths resolve against --workdir. Exit codes: 0 success, 2 usage,
3 validation, 4 backend, 5 numeric.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agents as ag
from . import dataforge as df
from . import metrics as mt
from .checkpoint import TrainFlags, load_checkpoint, save_checkpoint
from .errors import (
    BackendError,
    IcforgeError,
    NumericError,
    ParseError,
    ProtocolError,
    ValidationError,
)
from .imageio import load_image, load_mask, save_image, to_float, to_uint8
from .model import CriticModel, ModelConfig, patchify
from .objectives import (
    Adam,
    TrainItem,
    background_attention_mass,
    flow_sample,
    make_token_mask,
    run_training,
)
from .remote import ChatClient

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_BACKEND = 4
EXIT_NUMERIC = 5


class UsageError(Exception):
    """Bad invocation that argparse alone cannot catch."""


@dataclass
class RunConfig:
    """Resolved invocation: subcommand, seed, workdir, and options."""

    command: str
    seed: int = 0
    workdir: str = "."
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed,
                "workdir": self.workdir, "options": dict(self.options)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2,
                                         sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        d = json.loads(Path(path).read_text())
        for key in ("command", "seed", "workdir", "options"):
            if key not in d:
                raise ValidationError(f"config file missing '{key}'")
        return cls(d["command"], d["seed"], d["workdir"], dict(d["options"]))


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _config_values(args) -> dict:
    """Flatten a --config file into flag defaults."""
    if not args.config:
        return {}
    raw = json.loads(Path(args.config).read_text())
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    if set(raw) >= {"command", "options"}:
        flat = dict(raw["options"])
        flat.setdefault("seed", raw.get("seed"))
        flat.setdefault("workdir", raw.get("workdir"))
    else:
        flat = dict(raw)
    known = set(vars(args))
    for key in flat:
        if key not in known:
            raise UsageError(f"unknown config key '{key}'")
    return flat


class Resolver:
    """first non-None of: CLI flag, config value, hard default."""

    def __init__(self, args):
        self.args = args
        self.cfg = _config_values(args)
        self.resolved: dict = {}

    def get(self, name: str, default=None, required: bool = False):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.cfg.get(name)
        if value is None:
            value = default
        if required and value is None:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
        self.resolved[name] = value
        return value

    def run_config(self, command: str) -> RunConfig:
        opts = {k: v for k, v in self.resolved.items()
                if k not in ("seed", "workdir") and v is not None}
        return RunConfig(command, seed=self.resolved.get("seed", 0),
                         workdir=str(self.resolved.get("workdir", ".")),
                         options=opts)


def _workdir(res: Resolver) -> Path:
    return Path(res.get("workdir", "."))


def _seed(res: Resolver) -> int:
    return int(res.get("seed", 0))


def _path(root: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else root / p


def _parse_box(text: str) -> ag.BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"box '{text}' needs 4 comma-separated integers")
    try:
        vals = [int(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"box '{text}' has non-integer parts") from exc
    return ag.BBox.from_seq(vals)


def _maybe_dump(res: Resolver, args, command: str) -> None:
    if getattr(args, "dump_config", None):
        res.run_config(command).save(args.dump_config)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_forge(args) -> int:
    res = Resolver(args)
    root = _workdir(res)
    n = res.get("n", required=True)
    if int(n) < 1:
        raise UsageError("forge needs --n >= 1")
    seed = _seed(res)
    side = int(res.get("side", 32))
    out = _path(root, res.get("out", "dataset"))
    backend_kind = res.get("backend", "oracle")
    if backend_kind == "remote":
        endpoint = res.get("endpoint", required=True)
        client = ChatClient(endpoint, res.get("model_name", "default"))
        backend = df.RemoteFilterBackend(client)
    elif backend_kind == "oracle":
        backend = df.OracleFilterBackend()
    else:
        raise UsageError(f"unknown backend '{backend_kind}'")
    _maybe_dump(res, args, "forge")
    manifest = df.forge_dataset(out, int(n), seed, side=side, backend=backend)
    print(f"records={len(manifest.records)}")
    print(out / "manifest.jsonl")
    return EXIT_OK


def _item_from_record(dataset: Path, rec) -> TrainItem:
    return TrainItem(
        reference=to_float(load_image(dataset / rec.files["reference"])),
        degraded=to_float(load_image(dataset / rec.files["degraded"])),
        target=to_float(load_image(dataset / rec.files["target"])),
        object_mask=load_mask(dataset / rec.files["object_mask"]),
        tag=rec.tag,
    )


def _load_items(dataset: Path, limit=None) -> list[TrainItem]:
    manifest = df.DatasetManifest.load(dataset / "manifest.jsonl")
    records = manifest.records[: int(limit)] if limit else manifest.records
    return [_item_from_record(dataset, rec) for rec in records]


def _model_config(res: Resolver, seed: int) -> ModelConfig:
    return ModelConfig(
        image_side=int(res.get("image_side", 32)),
        patch=int(res.get("patch", 4)),
        d=int(res.get("dim", 64)),
        heads=int(res.get("heads", 4)),
        n_double=int(res.get("n_double", 2)),
        n_single=int(res.get("n_single", 2)),
        d_t=int(res.get("d_t", 64)),
        d_c=int(res.get("d_c", 32)),
        seed=seed,
    )


def cmd_train(args) -> int:
    res = Resolver(args)
    root = _workdir(res)
    seed = _seed(res)
    dataset = _path(root, res.get("dataset", required=True))
    steps = int(res.get("steps", 200))
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    batch = int(res.get("batch", 4))
    lr = float(res.get("lr", 1e-3))
    # None here means "not given": fresh runs get hard defaults, resumed
    # runs inherit the checkpoint's flags.
    with_aal = res.get("with_aal")
    with_de = res.get("with_de")
    frozen_base = res.get("frozen_base")
    lora_rank = res.get("lora_rank")
    lora_scale = res.get("lora_scale")
    limit = res.get("limit")
    ckpt_out = _path(root, res.get("ckpt_out", "critic.ckpt"))
    resume = res.get("resume")
    log_path = res.get("log")

    items = _load_items(dataset, limit)
    opt = Adam(lr=lr)
    if resume is not None:
        model, saved, start_step, extras = load_checkpoint(_path(root, resume))
        if extras:
            opt.load_state(extras)
        flags = TrainFlags(
            with_aal=saved.with_aal if with_aal is None else bool(with_aal),
            with_de=saved.with_de if with_de is None else bool(with_de),
            frozen_base=saved.frozen_base if frozen_base is None
            else bool(frozen_base),
            lora_rank=saved.lora_rank,
            lora_scale=saved.lora_scale,
        )
    else:
        model = CriticModel(_model_config(res, seed))
        flags = TrainFlags(
            with_aal=True if with_aal is None else bool(with_aal),
            with_de=True if with_de is None else bool(with_de),
            frozen_base=False if frozen_base is None else bool(frozen_base),
            lora_rank=0 if lora_rank is None else int(lora_rank),
            lora_scale=1.0 if lora_scale is None else float(lora_scale),
        )
        if flags.lora_rank > 0:
            model.add_adapters(flags.lora_rank, flags.lora_scale)
        start_step = 0
    _maybe_dump(res, args, "train")

    log_fh = open(_path(root, log_path), "a") if log_path else None
    try:
        logs = run_training(model, items, steps, opt, seed=seed,
                            with_aal=flags.with_aal, with_de=flags.with_de,
                            frozen_base=flags.frozen_base, batch_size=batch,
                            start_step=start_step, log_fh=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(ckpt_out, model, flags, step=start_step + steps,
                    extras=opt.export_state())
    if logs:
        print(f"final_total={logs[-1].losses.total:.6f}")
    print(f"steps={start_step + steps}")
    print(ckpt_out)
    return EXIT_OK


def cmd_correct(args) -> int:
    res = Resolver(args)
    root = _workdir(res)
    seed = _seed(res)
    ref_path = _path(root, res.get("ref", required=True))
    tgt_path = _path(root, res.get("tgt", required=True))
    bbox_ref = _parse_box(res.get("bbox_ref", required=True))
    bbox_tgt = _parse_box(res.get("bbox_tgt", required=True))
    tag = res.get("tag", required=True)
    ckpt = _path(root, res.get("ckpt", required=True))
    out = _path(root, res.get("out", "corrected.png"))
    steps = int(res.get("sample_steps", 8))
    n_avg = int(res.get("n_avg", 1))
    _maybe_dump(res, args, "correct")
    model, flags, _, _ = load_checkpoint(ckpt)
    corrected = ag.critic_correct(model, flags, load_image(ref_path),
                                  load_image(tgt_path), bbox_ref, bbox_tgt,
                                  tag, steps=steps, seed=seed, n_avg=n_avg)
    save_image(out, corrected)
    print(out)
    return EXIT_OK


def _agent_backend(res: Resolver):
    kind = res.get("backend", "oracle")
    if kind == "remote":
        endpoint = res.get("endpoint", required=True)
        client = ChatClient(endpoint, res.get("model_name", "default"))
        return ag.RemoteAgentBackend(client,
                                     find_order=res.get("find_order", "xyxy"))
    if kind == "oracle":
        return ag.OracleAgentBackend(
            tau=float(res.get("tau", 18.0 / 255.0)),
            ncc_floor=float(res.get("ncc_floor", 0.35)),
        )
    raise UsageError(f"unknown backend '{kind}'")


def _report_session(session) -> None:
    for event in session.history:
        print(json.dumps(event, sort_keys=True))
    print(f"state={session.state}")
    completions = [e for e in session.history if e.get("action") == "complete"]
    if completions:
        print(completions[0]["message"])


def cmd_agent(args) -> int:
    res = Resolver(args)
    root = _workdir(res)
    seed = _seed(res)
    sessions_dir = _path(root, res.get("sessions_dir", "sessions"))
    backend = _agent_backend(res)
    ckpt = res.get("ckpt")
    critic_fn = ag.make_critic_fn(_path(root, ckpt),
                                  steps=int(res.get("sample_steps", 8)),
                                  n_avg=int(res.get("n_avg", 1))) \
        if ckpt else None
    store = ag.SessionStore(sessions_dir, backend=backend,
                            critic_fn=critic_fn, seed=seed)
    if bool(res.get("serve", False)):
        from .service import create_app
        ui_dir = res.get("ui_dir")
        host = res.get("host", "127.0.0.1")
        port = int(res.get("port", 8000))
        _maybe_dump(res, args, "agent")
        import uvicorn
        uvicorn.run(create_app(store, ui_dir=ui_dir), host=host, port=port)
        return EXIT_OK

    ref = _path(root, res.get("ref", required=True))
    tgt = _path(root, res.get("tgt", required=True))
    tag = res.get("tag", "object")
    session_id = res.get("session_id")
    decisions_path = res.get("decisions")
    _maybe_dump(res, args, "agent")
    session = store.create(ref, tgt, tag=tag, session_id=session_id)
    if decisions_path is not None:
        lines = [ln for ln in Path(_path(root, decisions_path))
                 .read_text().splitlines()
                 if ln.strip() and not ln.strip().startswith("#")]
        for line in lines:
            if session.state in ("Done", "Failed"):
                break
            session = store.decide(session.id, ag.Decision.from_line(line))
    else:
        while session.state in ag.REVIEW_STEP:
            step = ag.REVIEW_STEP[session.state]
            print(ag.accept_question(step))
            answer = input().strip().lower()
            if answer in ("y", "yes"):
                decision = ag.Decision("accept")
            else:
                print("override (bbox x,y,x,y | tag WORD | empty):")
                extra = input().strip()
                if extra:
                    decision = ag.Decision.from_line(f"reject {extra}")
                else:
                    decision = ag.Decision("reject")
            session = store.decide(session.id, decision)
    _report_session(session)
    return EXIT_OK


def _load_predictions(path) -> tuple[dict, dict | None]:
    tgt: dict = {}
    ref: dict = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "id" not in d:
            raise ValidationError(f"prediction line missing 'id': {line!r}")
        if d.get("bbox_tgt") is not None:
            tgt[d["id"]] = tuple(d["bbox_tgt"])
        if d.get("bbox_ref") is not None:
            ref[d["id"]] = tuple(d["bbox_ref"])
    return tgt, (ref or None)


def cmd_eval(args) -> int:
    res = Resolver(args)
    root = _workdir(res)
    predictions = _path(root, res.get("predictions", required=True))
    annotations = _path(root, res.get("annotations", required=True))
    out = _path(root, res.get("out", "report.json"))
    csv_out = res.get("csv")
    _maybe_dump(res, args, "eval")
    try:
        anns = mt.AnnotationSet.load(annotations)
    except KeyError as exc:
        raise ValidationError(f"annotation line missing key {exc}") from exc
    if not anns.items:
        raise ValidationError(f"annotation file {annotations} is empty")
    preds_tgt, preds_ref = _load_predictions(predictions)
    report = mt.evaluate_boxes(preds_tgt, anns, preds_ref)
    Path(out).write_text(report.to_json() + "\n")
    if csv_out:
        Path(_path(root, csv_out)).write_text(report.to_csv())
    print(f"mean_iou_tgt={report.mean_iou_tgt:.6f}")
    print(f"map50_tgt={report.map50_tgt:.6f}")
    if report.map50_pooled is not None:
        print(f"map50_pooled={report.map50_pooled:.6f}")
    print(out)
    return EXIT_OK


def _upscale(grid: np.ndarray, factor: int = 16) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def cmd_attn_dump(args) -> int:
    res = Resolver(args)
    root = _workdir(res)
    seed = _seed(res)
    ckpt = _path(root, res.get("ckpt", required=True))
    dataset = _path(root, res.get("dataset", required=True))
    record_id = res.get("record")
    out_dir = _path(root, res.get("out", "attn"))
    t_value = float(res.get("t", 0.5))
    _maybe_dump(res, args, "attn-dump")

    model, flags, _, _ = load_checkpoint(ckpt)
    cfg = model.cfg
    manifest = df.DatasetManifest.load(dataset / "manifest.jsonl")
    matches = [r for r in manifest.records
               if record_id is None or r.id == record_id]
    if not matches:
        raise ValidationError(f"no record '{record_id}' in {dataset}")
    rec = matches[0]
    item = _item_from_record(dataset, rec)

    rng = np.random.default_rng([seed, 3])
    eps = rng.standard_normal((cfg.n_patches, cfg.d_latent))
    fs = flow_sample(patchify(item.target, cfg.patch), eps, t_value)
    prompt = model.encode_prompt(item.tag)
    if flags.with_de:
        prompt = model.detail_encoder_fuse(
            prompt,
            model.embed_image(item.reference),
            model.embed_image(item.degraded),
        )
    from . import autodiff as ad
    _, record = model.forward(
        fs.z_t, fs.t, prompt,
        ad.Tensor(patchify(item.reference, cfg.patch)),
        ad.Tensor(patchify(item.degraded, cfg.patch)),
    )
    mask = make_token_mask(item.object_mask, cfg.patch)

    out_dir.mkdir(parents=True, exist_ok=True)
    stats: dict = {
        "record": rec.id,
        "tag": rec.tag,
        "t": t_value,
        "background_mass_ref": background_attention_mass(record, mask),
        "layers": {},
    }
    for j, (m_ref, m_inp) in enumerate(zip(record.ref_maps, record.inp_maps)):
        for branch, tensor in (("ref", m_ref), ("inp", m_inp)):
            raw = tensor.data
            lo, hi = float(raw.min()), float(raw.max())
            norm = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
            heat = norm.mean(axis=0).reshape(cfg.grid, cfg.grid)
            png = to_uint8(np.repeat(_upscale(heat)[..., None], 3, axis=2))
            save_image(out_dir / f"layer{j}_{branch}.png", png)
            stats["layers"][f"layer{j}_{branch}"] = {
                "min": lo, "max": hi, "mean": float(raw.mean()),
            }
    (out_dir / "stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"maps={2 * len(record.ref_maps)}")
    print(out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--workdir", default=None,
                     help="root for relative paths (default: .)")
    sub.add_argument("--seed", type=int, default=None,
                     help="seed for reproducible runs (default: 0)")
    sub.add_argument("--config", default=None,
                     help="JSON file with option defaults")
    sub.add_argument("--dump-config", default=None,
                     help="write the resolved configuration to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icforge",
        description="forge data, train the critic, and run review sessions",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("forge", help="forge reference/degraded/target triplets")
    _add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--side", type=int, default=None)
    p.add_argument("--backend", choices=("oracle", "remote"), default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model-name", dest="model_name", default=None)
    p.set_defaults(func=cmd_forge)

    p = subs.add_parser("train", help="train the critic on forged triplets")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--with-aal", dest="with_aal",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--with-de", dest="with_de",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--frozen-base", dest="frozen_base",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--lora-rank", dest="lora_rank", type=int, default=None)
    p.add_argument("--lora-scale", dest="lora_scale", type=float, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--ckpt-out", dest="ckpt_out", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--image-side", dest="image_side", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--n-double", dest="n_double", type=int, default=None)
    p.add_argument("--n-single", dest="n_single", type=int, default=None)
    p.add_argument("--d-t", dest="d_t", type=int, default=None)
    p.add_argument("--d-c", dest="d_c", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("correct", help="one-shot critic run over two boxes")
    _add_common(p)
    p.add_argument("--ref", default=None)
    p.add_argument("--tgt", default=None)
    p.add_argument("--bbox-ref", dest="bbox_ref", default=None)
    p.add_argument("--bbox-tgt", dest="bbox_tgt", default=None)
    p.add_argument("--tag", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--sample-steps", dest="sample_steps", type=int, default=None)
    p.add_argument("--n-avg", dest="n_avg", type=int, default=None)
    p.set_defaults(func=cmd_correct)

    p = subs.add_parser("agent", help="run the review-gated correction workflow")
    _add_common(p)
    p.add_argument("--ref", default=None)
    p.add_argument("--tgt", default=None)
    p.add_argument("--tag", default=None)
    p.add_argument("--sessions-dir", dest="sessions_dir", default=None)
    p.add_argument("--session-id", dest="session_id", default=None)
    p.add_argument("--backend", choices=("oracle", "remote"), default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--model-name", dest="model_name", default=None)
    p.add_argument("--find-order", dest="find_order",
                   choices=("xyxy", "xxyy"), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--ncc-floor", dest="ncc_floor", type=float, default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--sample-steps", dest="sample_steps", type=int, default=None)
    p.add_argument("--n-avg", dest="n_avg", type=int, default=None)
    p.add_argument("--decisions", default=None,
                   help="scripted decision file, one decision per line")
    p.add_argument("--serve", action=argparse.BooleanOptionalAction,
                   default=None, help="start the session service instead")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--ui-dir", dest="ui_dir", default=None)
    p.set_defaults(func=cmd_agent)

    p = subs.add_parser("eval", help="score predictions against annotations")
    _add_common(p)
    p.add_argument("--predictions", default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("attn-dump", help="dump per-layer attention heatmaps")
    _add_common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--record", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--t", type=float, default=None)
    p.set_defaults(func=cmd_attn_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ParseError, ProtocolError, IcforgeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
