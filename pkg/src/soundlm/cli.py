"""Single entry point: every pipeline stage and experiment as a subcommand.

Exit codes: 0 success, 1 operational error, 2 an experiment ran fine but
failed its acceptance thresholds. All subcommands honor ``--seed`` and are
reproducible under it; ``UALM_DATA_DIR`` is the default artifact root.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import codec, dpo as dpo_mod, fileio, metrics, reason, world
from .data import prompt_ids, uncond_prompt_ids
from .errors import ConfigError, FormatError, InputError
from .experiments import EXPERIMENT_NAMES, ExperimentSpec, Lab, LabConfig, run_experiment
from .model import Model
from .sampling import SamplerParams, generate


def _data_root(args):
    return args.out or os.environ.get("UALM_DATA_DIR") or ".cache/soundlm"


def _lab_config(args):
    cfg = LabConfig(seed=args.seed)
    if args.config:
        raw = fileio.read_config(args.config)
        fields = {f.name: f.type for f in LabConfig.__dataclass_fields__.values()}
        for key, value in raw.items():
            if key not in LabConfig.__dataclass_fields__:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            elif isinstance(current, tuple):
                setattr(cfg, key, tuple(float(v) for v in value.split(",")))
            else:
                setattr(cfg, key, value)
        cfg.seed = args.seed
    return cfg


def _lab(args):
    return Lab(_lab_config(args), cache_dir=_data_root(args), verbose=True)


def cmd_world_build(args):
    cfg = _lab_config(args)
    scenes = world.build_scenes(args.scenes, args.seed, cfg.world_config())
    out = os.path.join(_data_root(args), "world")
    path = world.write_dataset(scenes, out)
    print(f"wrote {args.scenes} scenes to {path}")
    return 0


def cmd_codec_train(args):
    lab = _lab(args)
    lab.books()
    print(f"codec books at {lab.path('codec.urvq')}")
    return 0


def cmd_pretrain(args):
    lab = _lab(args)
    lab.base_model()
    print(f"base checkpoint at {lab.path('base.ualm')}")
    print(f"metrics at {lab.path('pretrain_metrics.csv')}")
    return 0


def cmd_sft(args):
    lab = _lab(args)
    model = lab.sft1_model() if args.round == 1 else lab.sft2_model()
    name = "sft1" if args.round == 1 else "sft2"
    print(f"{name} checkpoint at {lab.path(name + '.ualm')}")
    return 0


def cmd_dpo(args):
    lab = _lab(args)
    if args.pairs:
        pairs = dpo_mod.read_pairs(args.pairs)
    else:
        pairs = lab.dpo_pairs()
    model, ref = lab.adapted_and_ref()
    model = model.clone()
    cfg = dpo_mod.DpoConfig(
        beta=args.beta, ce_weight=args.ce_weight, lr=lab.cfg.dpo_lr,
        seed=args.seed,
    )
    rows = dpo_mod.dpo_train(model, ref, pairs, cfg, args.steps,
                             budget=lab.cfg.pack_budget)
    out_path = os.path.join(_data_root(args), "dpo_cli.ualm")
    model.save(out_path)
    print(f"final dpo loss {rows[-1]['dpo_loss']:.6f}; checkpoint at {out_path}")
    return 0


def cmd_sample(args):
    model = Model.load(args.model)
    books = codec.load_codebooks(args.books)
    vocab = model.vocab
    params = SamplerParams(
        lam=args.lam, top_k=args.topk, seed=args.seed, max_frames=args.frames
    )
    res = generate(
        model, prompt_ids(vocab, args.prompt, "audio"), "audio", params,
        uncond_prompt_ids=uncond_prompt_ids(vocab, "audio"),
    )
    if res.grid is None:
        raise InputError("no audio frames decoded")
    frames = codec.decode_sequence(res.grid, books)
    fileio.write_frames(args.out_file, frames)
    sidecar = args.out_file + ".tokens.json"
    with open(sidecar, "w") as f:
        json.dump(
            {"prompt": args.prompt, "lambda": args.lam, "topk": args.topk,
             "seed": args.seed, "finish": res.finish_reason,
             "tokens": res.grid.tolist()},
            f, sort_keys=True,
        )
    heard = world.oracle_listen(frames)
    print(f"wrote {frames.shape[0]} frames to {args.out_file} (+{sidecar})")
    print(f"oracle hears: {', '.join(heard.keywords) or '(nothing)'}")
    return 0


def cmd_eval(args):
    model = Model.load(args.model)
    books = codec.load_codebooks(args.books)
    records = [r for r in world.read_records(args.set) if r["task"] == "t2a"]
    if not records:
        raise InputError(f"{args.set}: no t2a records to evaluate")
    base = os.path.dirname(os.path.abspath(args.set))
    gen_feats, ref_feats, gen_probs, kl_p, kl_q, adherences = [], [], [], [], [], []
    for i, rec in enumerate(records):
        ref_frames = fileio.read_frames(os.path.join(base, rec["frames_path"]))
        caption = world.oracle_listen(ref_frames)
        res = generate(
            model, prompt_ids(model.vocab, rec["prompt_text"], "audio"), "audio",
            SamplerParams(lam=args.lam, top_k=args.topk, seed=args.seed * 331 + i,
                          max_frames=ref_frames.shape[0]),
            uncond_prompt_ids=uncond_prompt_ids(model.vocab, "audio"),
        )
        if res.grid is None:
            continue
        frames = codec.decode_sequence(res.grid, books)
        gen_feats.append(world.oracle_features(frames))
        ref_feats.append(world.oracle_features(ref_frames))
        gen_probs.append(world.oracle_class_probs(frames))
        kl_p.append(world.oracle_class_probs(ref_frames))
        kl_q.append(world.oracle_class_probs(frames))
        adherences.append(world.adherence_score(frames, caption))
    fd = metrics.frechet_distance(
        metrics.FeatureCloud(np.asarray(gen_feats), "generated"),
        metrics.FeatureCloud(np.asarray(ref_feats), "reference"),
    )
    kl = metrics.kl_metric(kl_p, kl_q)
    is_score = metrics.inception_score(np.asarray(gen_probs))
    cl = float(np.mean(adherences))
    with open(args.report, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["FD", "KL", "IS", "CL"])
        w.writerow([f"{fd:.6g}", f"{kl:.6g}", f"{is_score:.6g}", f"{cl:.6g}"])
    print(f"FD={fd:.4f} KL={kl:.4f} IS={is_score:.4f} CL={cl:.4f} -> {args.report}")
    return 0


def cmd_reflect(args):
    model = Model.load(args.model)
    books = codec.load_codebooks(args.books)
    with open(args.prompts) as f:
        prompts = [line.strip() for line in f if line.strip()]
    with open(args.out_file, "w") as f:
        for i, prompt in enumerate(prompts):
            trace = reason.self_reflect(
                model, prompt,
                SamplerParams(lam=args.lam, top_k=args.topk, seed=args.seed + i),
                books,
            )
            f.write(json.dumps(trace.to_record(f"trace{i}"), sort_keys=True) + "\n")
    print(f"wrote {len(prompts)} traces to {args.out_file}")
    return 0


def cmd_chat(args):
    model = Model.load(args.model)
    vocab = model.vocab
    print("dialogue session; empty line to quit")
    elements = [vocab.BOS, vocab.USER]
    first = True
    while True:
        try:
            user = input("you> ").strip()
        except EOFError:
            return 0
        if not user:
            return 0
        if not first:
            elements.append(vocab.USER)
        first = False
        elements.extend(vocab.encode_text(user))
        elements.append(vocab.ASSISTANT)
        out = generate(
            model, elements, "text", SamplerParams(),
            stop_ids={vocab.EOS, vocab.USER, vocab.PLAN_CLOSE}, max_new_tokens=220,
        )
        ids = out.text_ids
        elements.extend(ids)
        shown = vocab.decode_text(
            [t for t in ids if t not in (vocab.USER, vocab.EOS)]
        )
        print(f"assistant> {shown}")
        if vocab.PLAN_OPEN in ids:
            print("(plan emitted; session complete)")
            return 0


def cmd_experiment(args):
    lab = _lab(args)
    out = os.path.join(_data_root(args), "experiments")
    spec = ExperimentSpec(name=args.name, out_dir=out, seeds=(args.seed,))
    result = run_experiment(spec, lab)
    for check, ok in result.verdict.items():
        print(f"{'PASS' if ok else 'FAIL'} {result.name}:{check}")
    print(f"report: {result.csv_path}")
    return 0 if result.passed else 2


def build_parser():
    parser = argparse.ArgumentParser(prog="soundlm", description=__doc__)
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="artifact root (default UALM_DATA_DIR)")
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("world", help="synthetic world datasets")
    wsub = w.add_subparsers(dest="world_cmd", required=True)
    wb = wsub.add_parser("build")
    wb.add_argument("--scenes", type=int, required=True)
    wb.set_defaults(fn=cmd_world_build)

    c = sub.add_parser("codec", help="residual quantizer")
    csub = c.add_subparsers(dest="codec_cmd", required=True)
    ct = csub.add_parser("train")
    ct.set_defaults(fn=cmd_codec_train)

    p = sub.add_parser("pretrain", help="alignment + multimodal pretraining")
    p.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("sft", help="reasoning SFT rounds")
    s.add_argument("--round", type=int, choices=(1, 2), required=True)
    s.set_defaults(fn=cmd_sft)

    d = sub.add_parser("dpo", help="preference optimization")
    d.add_argument("--pairs", help="pair file (default: build from the lab)")
    d.add_argument("--beta", type=float, default=0.1)
    d.add_argument("--ce-weight", type=float, default=1.0, dest="ce_weight")
    d.add_argument("--steps", type=int, default=150)
    d.set_defaults(fn=cmd_dpo)

    g = sub.add_parser("sample", help="guided audio generation")
    g.add_argument("--prompt", required=True)
    g.add_argument("--lambda", type=float, default=3.0, dest="lam")
    g.add_argument("--topk", type=int, default=20)
    g.add_argument("--frames", type=int, default=48)
    g.add_argument("--model", required=True)
    g.add_argument("--books", required=True)
    g.add_argument("--out", dest="out_file", required=True)
    g.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="FD/KL/IS/CL report")
    e.add_argument("--set", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--books", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--lambda", type=float, default=3.0, dest="lam")
    e.add_argument("--topk", type=int, default=20)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("reflect", help="reflection traces for prompts")
    r.add_argument("--model", required=True)
    r.add_argument("--books", required=True)
    r.add_argument("--prompts", required=True)
    r.add_argument("--out", dest="out_file", required=True)
    r.add_argument("--lambda", type=float, default=3.0, dest="lam")
    r.add_argument("--topk", type=int, default=20)
    r.set_defaults(fn=cmd_reflect)

    h = sub.add_parser("chat", help="interactive dialogue session")
    h.add_argument("--model", required=True)
    h.set_defaults(fn=cmd_chat)

    x = sub.add_parser("experiment", help="ablation experiments with verdicts")
    x.add_argument("--name", required=True, choices=EXPERIMENT_NAMES)
    x.set_defaults(fn=cmd_experiment)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
