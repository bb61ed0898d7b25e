"""Command-line interface.

Generation commands build the same request models the HTTP service accepts.
They run in-process against ``--ckpt`` or, with ``--server URL``, post the
request to a running ``layerstack serve``. Every subcommand also reads
``--config FILE`` (JSON); explicit flags win over config values.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("layerstack")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# --- config merging ------------------------------------------------------------------

DEFAULTS = {
    "make-data": dict(num=1000, layer_mix="0.85,0.12,0.03", resolution=32, seed=0),
    "sample": dict(steps=50, cfg=3.0, smg=3.0, seed=0, num=1),
    "inpaint": dict(steps=50, cfg=3.0, smg=3.0, seed=0, record=None, k_mask_freeze=1, mask_prior=None),
    "style": dict(steps=50, cfg=3.0, smg=3.0, seed=0, record=None, strength=0.8),
    "priors": dict(steps=50, cfg=3.0, smg=3.0, seed=0),
    "iterate": dict(steps=50, cfg=3.0, smg=3.0, seed=0, record=None, mask_prior=None),
    "eval": dict(n=256, steps=50, cfg=3.0, smg=3.0, seed=0, batch_size=8, loss_log=None, out=None),
    "train-classifier": dict(num=2000, steps=600, seed=0),
    "serve": dict(host="127.0.0.1", port=8000),
}


def resolve(args) -> argparse.Namespace:
    """Fill unset flags from --config, then from per-command defaults."""
    cfg = {}
    if getattr(args, "config", None) and args.command != "train":
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    defaults = DEFAULTS.get(args.command, {})
    for key, value in vars(args).items():
        if value is None:
            if key in cfg:
                setattr(args, key, cfg[key])
            elif key in defaults:
                setattr(args, key, defaults[key])
    return args


def require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required {flags}")


# --- parser ------------------------------------------------------------------------------

def _guidance_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale")
    p.add_argument("--smg", type=float, help="self-mask guidance scale")
    p.add_argument("--seed", type=int)


def _model_flags(p):
    p.add_argument("--ckpt", help="checkpoint file (in-process mode)")
    p.add_argument("--server", help="base URL of a running service; replaces --ckpt")
    p.add_argument("--out", help="output directory (dataset layout)")
    _guidance_flags(p)


def _source_flags(p):
    p.add_argument("--source", help="dataset directory holding the input layer set")
    p.add_argument("--record", help="record id inside --source (default: first)")


def build_parser() -> Parser:
    parser = Parser(prog="layerstack", description="Layered text-to-image diffusion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, required=True)

    p = sub.add_parser("make-data", help="generate a synthetic layered dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--num", type=int)
    p.add_argument("--layer-mix", dest="layer_mix")
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a denoiser from a JSON config")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--dataset")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("sample", help="generate layer sets from prompts")
    p.add_argument("--config")
    _model_flags(p)
    p.add_argument("--global", dest="global_prompt")
    p.add_argument("--layers", nargs="+", help='layer prompts, background first, e.g. "the background" "a red circle"')
    p.add_argument("--num", type=int, help="number of samples (seeds seed..seed+num-1)")

    p = sub.add_parser("inpaint", help="regenerate chosen layers of an existing set")
    p.add_argument("--config")
    _model_flags(p)
    _source_flags(p)
    p.add_argument("--target-layer", dest="target_layer", type=int, action="append")
    p.add_argument("--prompt", action="append", help="replacement prompt, one per --target-layer")
    p.add_argument("--mask-prior", dest="mask_prior", action="append", help="mask PNG per target (optional)")
    p.add_argument("--k-mask-freeze", dest="k_mask_freeze", type=int)
    p.add_argument("--global", dest="global_prompt")

    p = sub.add_parser("style", help="restyle chosen layers")
    p.add_argument("--config")
    _model_flags(p)
    _source_flags(p)
    p.add_argument("--target-layer", dest="target_layer", type=int, action="append")
    p.add_argument("--style")
    p.add_argument("--strength", type=float)
    p.add_argument("--global", dest="global_prompt")

    p = sub.add_parser("priors", help="sample with given foreground masks")
    p.add_argument("--config")
    _model_flags(p)
    p.add_argument("--global", dest="global_prompt")
    p.add_argument("--layers", nargs="+")
    p.add_argument("--mask-prior", dest="mask_prior", action="append", help="mask PNG, one per foreground")

    p = sub.add_parser("iterate", help="add foregrounds one at a time to a two-layer set")
    p.add_argument("--config")
    _model_flags(p)
    _source_flags(p)
    p.add_argument("--prompt", action="append", help="prompt of each added foreground")
    p.add_argument("--mask-prior", dest="mask_prior", action="append", help="mask PNG per addition (optional)")

    p = sub.add_parser("eval", help="sample and score a checkpoint")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--data", help="held-out dataset whose prompts are used")
    p.add_argument("--n", type=int)
    p.add_argument("--classifier", help="attribute classifier checkpoint")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--loss-log", dest="loss_log", help="loss.csv to attach to the report")
    p.add_argument("--out", help="write the JSON report here (default: stdout)")
    _guidance_flags(p)

    p = sub.add_parser("train-classifier", help="fit the attribute classifier used by eval")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--data", help="dataset directory (default: freshly generated scenes)")
    p.add_argument("--num", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


# --- helpers ---------------------------------------------------------------------------------

def _guidance(args):
    from .service import GuidancePayload

    return GuidancePayload(steps=args.steps, cfg_scale=args.cfg, smg_scale=args.smg, seed=args.seed)


def _read_png_b64(path) -> str:
    import base64

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return base64.b64encode(p.read_bytes()).decode("ascii")


def _load_source(args):
    from .service import LayerSetPayload
    from .synthdata import load_record, read_records

    require(args, "source")
    records = read_records(args.source)
    if not records:
        raise UsageError(f"{args.source} holds no records")
    if args.record is None:
        rec = records[0]
    else:
        match = [r for r in records if r.id == str(args.record)]
        if not match:
            raise UsageError(f"record {args.record!r} not found in {args.source}")
        rec = match[0]
    return LayerSetPayload.from_layer_set(load_record(args.source, rec))


def _call(args, endpoint: str, request):
    """Run ``request`` against the local engine or the remote service."""
    from .service import Engine, GenerationResponse

    if args.server:
        import httpx

        url = args.server.rstrip("/") + "/" + endpoint
        try:
            r = httpx.post(url, json=request.model_dump(mode="json"), timeout=None)
        except httpx.HTTPError as exc:
            raise RuntimeError(f"request to {url} failed: {exc}") from exc
        if r.status_code in (400, 404, 422):
            raise UsageError(f"server rejected request: {r.text}")
        if r.status_code != 200:
            raise RuntimeError(f"server error {r.status_code}: {r.text}")
        return GenerationResponse.model_validate(r.json())
    require(args, "ckpt")
    engine = Engine.from_path(args.ckpt)
    return getattr(engine, endpoint)(request)


def _write_outputs(args, resp) -> Path:
    from .layerspace import composite
    from .synthdata import to_uint8, write_dataset
    from PIL import Image

    out = Path(args.out)
    sets = [p.to_layer_set() for p in resp.layer_sets]
    write_dataset(((f"{i:06d}", ls, None) for i, ls in enumerate(sets)), out)
    (out / "composites").mkdir(exist_ok=True)
    for i, ls in enumerate(sets):
        Image.fromarray(to_uint8(composite(ls).pixels), mode="RGB").save(out / "composites" / f"{i:06d}.png")
    summary = {"command": args.command, "num_sets": len(sets), "forward_passes": resp.forward_passes, "steps_run": resp.steps_run}
    (out / "result.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return out


# --- commands ------------------------------------------------------------------------------------

def cmd_make_data(args):
    from .synthdata import generate_dataset, write_dataset

    require(args, "out")
    try:
        mix = [float(v) for v in str(args.layer_mix).split(",")]
    except ValueError as exc:
        raise UsageError(f"--layer-mix must be three comma-separated numbers, got {args.layer_mix!r}") from exc
    if args.num < 1:
        raise UsageError("--num must be positive")
    manifest = write_dataset(generate_dataset(args.num, args.seed, mix, args.resolution), args.out)
    print(f"wrote {args.num} records to {manifest}")


def cmd_train(args):
    from .harness.train import TrainConfig, train

    require(args, "config")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    for key in ("dataset", "out_dir", "total_steps", "seed"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    try:
        config = TrainConfig(**raw)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    final = train(config, resume=args.resume)
    print(f"final checkpoint: {final}")


def cmd_sample(args):
    from .service import SampleRequest

    require(args, "global_prompt", "layers", "out")
    req = SampleRequest(global_prompt=args.global_prompt, layer_prompts=args.layers, num_samples=args.num, guidance=_guidance(args))
    _write_outputs(args, _call(args, "sample", req))


def cmd_inpaint(args):
    from .service import InpaintRequest

    require(args, "target_layer", "prompt", "out")
    priors = None
    if args.mask_prior:
        priors = [None if m in ("", "none") else _read_png_b64(m) for m in args.mask_prior]
    req = InpaintRequest(
        source=_load_source(args), targets=args.target_layer, prompts=args.prompt, mask_priors=priors,
        k_mask_freeze=args.k_mask_freeze, global_prompt=args.global_prompt, guidance=_guidance(args),
    )
    _write_outputs(args, _call(args, "inpaint", req))


def cmd_style(args):
    from .service import StyleRequest

    require(args, "target_layer", "style", "out")
    req = StyleRequest(
        source=_load_source(args), targets=args.target_layer, style=args.style, strength=args.strength,
        global_prompt=args.global_prompt, guidance=_guidance(args),
    )
    _write_outputs(args, _call(args, "style", req))


def cmd_priors(args):
    from .service import PriorsRequest

    require(args, "global_prompt", "layers", "mask_prior", "out")
    req = PriorsRequest(
        global_prompt=args.global_prompt, layer_prompts=args.layers,
        mask_priors=[_read_png_b64(m) for m in args.mask_prior], guidance=_guidance(args),
    )
    _write_outputs(args, _call(args, "priors", req))


def cmd_iterate(args):
    from .service import AdditionPayload, IterateRequest

    require(args, "prompt", "out")
    priors = args.mask_prior or [None] * len(args.prompt)
    if len(priors) != len(args.prompt):
        raise UsageError("give one --mask-prior per --prompt (use 'none' to skip one)")
    adds = [
        AdditionPayload(prompt=p, mask_prior=None if m in (None, "", "none") else _read_png_b64(m))
        for p, m in zip(args.prompt, priors)
    ]
    req = IterateRequest(base=_load_source(args), additions=adds, guidance=_guidance(args))
    _write_outputs(args, _call(args, "iterate", req))


def cmd_eval(args):
    from .harness.checkpoint import load_checkpoint
    from .harness.classifier import load_classifier
    from .harness.evaluate import evaluate
    from .harness.train import read_loss_log
    from .sampler import GuidanceConfig
    from .synthdata import read_records
    from .textcond import PromptTexts

    require(args, "ckpt", "data", "classifier")
    if not Path(args.classifier).is_file():
        raise UsageError(f"classifier checkpoint not found: {args.classifier}")
    clf = load_classifier(args.classifier)
    ckpt = load_checkpoint(args.ckpt)
    prompts = [PromptTexts.build(r.global_prompt, [l.prompt for l in r.layers]) for r in read_records(args.data)]
    curve = list(read_loss_log(args.loss_log)[1]) if args.loss_log else []
    gcfg = GuidanceConfig(steps=args.steps, cfg_scale=args.cfg, smg_scale=args.smg, seed=args.seed, record_trace=False)
    report = evaluate(ckpt, prompts, args.n, gcfg, clf, batch_size=args.batch_size, loss_curve=curve)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    summary = {k: getattr(report, k) for k in ("exclusivity", "color_accuracy", "shape_accuracy", "alignment_accuracy")}
    print(json.dumps(summary) if args.out else text)


def cmd_train_classifier(args):
    from .harness.classifier import accuracy, save_classifier, train_classifier
    from .synthdata import generate_dataset, read_dataset

    require(args, "out")
    if args.data:
        samples = [ls for ls, _ in read_dataset(args.data)]
    else:
        samples = [ls for _, ls, _ in generate_dataset(args.num, seed=args.seed + 1_000_003, layer_mix=(0.6, 0.3, 0.1))]
    model = train_classifier(samples, steps=args.steps, seed=args.seed)
    held = [ls for _, ls, _ in generate_dataset(300, seed=args.seed + 2_000_003, layer_mix=(0.6, 0.3, 0.1))]
    color, shape = accuracy(model, held)
    save_classifier(args.out, model, {"heldout_color_accuracy": color, "heldout_shape_accuracy": shape})
    print(json.dumps({"out": str(args.out), "heldout_color_accuracy": color, "heldout_shape_accuracy": shape}))


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    require(args, "ckpt")
    uvicorn.run(create_app(args.ckpt), host=args.host, port=args.port)


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "inpaint": cmd_inpaint,
    "style": cmd_style,
    "priors": cmd_priors,
    "iterate": cmd_iterate,
    "eval": cmd_eval,
    "train-classifier": cmd_train_classifier,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolve(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"layerstack: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, FileNotFoundError) as exc:
        print(f"layerstack: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"layerstack: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
