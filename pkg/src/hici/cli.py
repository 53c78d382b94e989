"""Command-line entry point.

Subcommands: train, eval-ppl, gradcheck, flops, params, attn-stats,
scaling. Every run that writes files takes `--out DIR`, writes a
run-manifest there before any computation, and never writes anywhere
else. All randomness flows from one `--seed` through numpy's PCG64
generator, so identical argv plus seed reproduce outputs byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import (
    ACCOUNTING_PRESETS,
    MICRO_CFG,
    PAPER_CONTEXTS,
    count_params,
    flops_table,
    flops_table_csv,
    format_flops_table,
    format_param_table,
    format_probe_table,
    param_table_csv,
    probe_table_csv,
    scaling_probe,
)
from .attention import AttnMassAccumulator
from .config import (
    SCOPE_ALL,
    SCOPE_PRECEDING,
    ConfigError,
    config_to_dict,
    load_hici_config,
    load_host_config,
)
from .gradcheck import check_host_block_gradients, check_module_gradients
from .host import (
    HostConfig,
    encode_bytes,
    eval_ppl,
    lm_forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tensor import GraphError, ShapeError, no_grad

SCALING_CFG = dataclasses.replace(MICRO_CFG, S=32, M=8, K=4, H=4, d=32, d_b=16, d_s=8)


def _write_manifest(out_dir, command, config_snapshot, seed, outputs):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "subcommand": command,
        "config": config_snapshot,
        "seed": seed,
        "version": __version__,
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _write_text(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(text)


def _apply_overrides(hici_cfg, args):
    changes = {}
    if getattr(args, "causal", None):
        changes["causal_segment_mask"] = args.causal == "on"
    if getattr(args, "global_scope", None):
        changes["global_scope"] = (SCOPE_ALL if args.global_scope == "all"
                                   else SCOPE_PRECEDING)
    return dataclasses.replace(hici_cfg, **changes) if changes else hici_cfg


# ---------------------------------------------------------------------------
# subcommands


def _cmd_params(args):
    if args.config:
        cfg = load_hici_config(args.config)
        layers, base = args.layers, args.base_params
    else:
        preset = ACCOUNTING_PRESETS[args.preset]
        cfg = preset.cfg
        layers = args.layers if args.layers else preset.dims.n_layers
        base = args.base_params if args.base_params else preset.base_params
    bd = count_params(cfg, layers, base)
    if args.out:
        _write_manifest(args.out, "params", config_to_dict(cfg), args.seed,
                        ["params.txt", "params.csv"])
        _write_text(args.out, "params.txt", format_param_table(bd, args.paper_layout) + "\n")
        _write_text(args.out, "params.csv", param_table_csv(bd))
    print(format_param_table(bd, paper_layout=args.paper_layout))
    return 0


def _cmd_flops(args):
    preset = ACCOUNTING_PRESETS[args.preset]
    contexts = ([int(c) for c in args.contexts.split(",")] if args.contexts
                else list(PAPER_CONTEXTS))
    rows = flops_table(preset, contexts=contexts, n_segments=args.segments)
    if args.out:
        _write_manifest(args.out, "flops",
                        {"preset": args.preset, "contexts": contexts,
                         "segments": args.segments},
                        args.seed, ["flops.txt", "flops.csv"])
        _write_text(args.out, "flops.txt", format_flops_table(rows) + "\n")
        _write_text(args.out, "flops.csv", flops_table_csv(rows))
    print(format_flops_table(rows))
    return 0


def _cmd_gradcheck(args):
    cfg = load_hici_config(args.config) if args.config else MICRO_CFG
    cfg = _apply_overrides(cfg, args)
    if args.out:
        _write_manifest(args.out, "gradcheck", config_to_dict(cfg), args.seed,
                        ["gradcheck.csv"])
    errors = check_module_gradients(cfg, seed=args.seed)
    host_cfg = HostConfig(vocab_size=17, n_layers=1, d=cfg.d, ffn_width=2 * cfg.d,
                          max_T=2 * cfg.S, seed=args.seed, hici=cfg)
    errors.update({f"host.{k}": v
                   for k, v in check_host_block_gradients(host_cfg, seed=args.seed).items()})
    worst = max(errors, key=errors.get)
    lines = ["tensor,rel_error"]
    for name in sorted(errors):
        lines.append(f"{name},{errors[name]!r}")
    if args.out:
        _write_text(args.out, "gradcheck.csv", "\n".join(lines) + "\n")
    print(f"checked {len(errors)} parameter tensors "
          f"(module + one host block), h=1e-5, 64-bit")
    print(f"max relative error: {errors[worst]:.3e} ({worst})")
    if errors[worst] > args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance:g}")
        return 1
    print(f"PASS: within tolerance {args.tolerance:g}")
    return 0


def _cmd_train(args):
    cfg = load_host_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg = dataclasses.replace(cfg, hici=_apply_overrides(cfg.hici, args))
    cfg.validate()
    with open(args.corpus, "rb") as fh:
        corpus = encode_bytes(fh.read())
    _write_manifest(args.out, "train", config_to_dict(cfg), cfg.seed,
                    ["loss_trace.csv", "checkpoint/"])
    params, opt, rng, trace = train(corpus, cfg, args.steps)
    lines = ["step,loss,lr"]
    lines.extend(f"{s},{loss!r},{lr!r}" for s, loss, lr in trace)
    _write_text(args.out, "loss_trace.csv", "\n".join(lines) + "\n")
    save_checkpoint(os.path.join(args.out, "checkpoint"), cfg, params, opt, rng,
                    step=args.steps)
    final = trace[-1][1] if trace else float("nan")
    print(f"trained {args.steps} steps; final loss {final:.6f}")
    print(f"checkpoint written to {os.path.join(args.out, 'checkpoint')}")
    return 0


def _cmd_eval_ppl(args):
    cfg, params, _opt, _rng, step = load_checkpoint(args.ckpt)
    cfg = dataclasses.replace(cfg, hici=_apply_overrides(cfg.hici, args))
    with open(args.text, "rb") as fh:
        ids = encode_bytes(fh.read())
    eval_len = args.eval_len if args.eval_len else cfg.max_T
    if args.out:
        _write_manifest(args.out, "eval-ppl",
                        {"ckpt_step": step, "eval_len": eval_len,
                         "stride": args.stride, "mode": args.mode,
                         "config": config_to_dict(cfg)},
                        args.seed, ["eval_ppl.json"])
    ppl = eval_ppl(params, cfg, ids, eval_len, args.stride, mode=args.mode)
    if args.out:
        _write_text(args.out, "eval_ppl.json", json.dumps(
            {"perplexity": ppl, "eval_len": eval_len, "stride": args.stride,
             "mode": args.mode, "n_tokens": int(ids.shape[0])},
            indent=1, sort_keys=True) + "\n")
    print(f"perplexity ({args.mode}, eval_len={eval_len}, stride={args.stride}): {ppl:.6f}")
    return 0


def _cmd_attn_stats(args):
    if args.ckpt:
        cfg, params, _opt, _rng, _step = load_checkpoint(args.ckpt)
    elif args.config:
        cfg = load_host_config(args.config)
        from .host import init_host_params
        params = init_host_params(cfg, np.random.default_rng(cfg.seed))
    else:
        raise ConfigError("attn-stats needs --ckpt or --config")
    cfg = dataclasses.replace(cfg, hici=_apply_overrides(cfg.hici, args))
    eval_len = args.eval_len if args.eval_len else cfg.max_T
    if args.text:
        with open(args.text, "rb") as fh:
            ids = encode_bytes(fh.read())[:eval_len]
    else:
        ids = np.random.default_rng(args.seed).integers(0, 256, size=eval_len)
    if args.out:
        _write_manifest(args.out, "attn-stats",
                        {"eval_len": eval_len, "uniform_probe": args.probe_uniform,
                         "config": config_to_dict(cfg)},
                        args.seed, ["attn_mass.csv"])
    collectors = [AttnMassAccumulator(cfg.hici.H) for _ in range(cfg.n_layers)]
    with no_grad():
        lm_forward(params, ids, cfg, mass_collectors=collectors,
                   uniform_probe=args.probe_uniform)
    lines = ["layer,head,frac_global,frac_local,frac_segment"]
    for layer_idx, acc in enumerate(collectors):
        for rec in acc.records(layer=layer_idx):
            lines.append(f"{rec.layer},{rec.head},{rec.frac_global!r},"
                         f"{rec.frac_local!r},{rec.frac_segment!r}")
    table = "\n".join(lines)
    if args.out:
        _write_text(args.out, "attn_mass.csv", table + "\n")
    print(table)
    return 0


def _cmd_scaling(args):
    cfg = load_hici_config(args.config) if args.config else SCALING_CFG
    cfg = _apply_overrides(cfg, args)
    t_list = ([int(t) for t in args.t_list.split(",")] if args.t_list
              else [2 * cfg.S, 4 * cfg.S, 8 * cfg.S, 16 * cfg.S])
    if args.out:
        _write_manifest(args.out, "scaling",
                        {"t_list": t_list, "config": config_to_dict(cfg)},
                        args.seed, ["scaling.csv"])
    rows = scaling_probe(cfg, t_list, seed=args.seed)
    if args.out:
        _write_text(args.out, "scaling.csv", probe_table_csv(rows))
    print(format_probe_table(rows))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hici",
        description="Hierarchical construction-integration attention toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default,
                       help="root seed for the run's PCG64 generator")
        p.add_argument("--out", help="output directory (only place the run writes)")

    p = sub.add_parser("params", help="added-parameter accounting table")
    p.add_argument("--preset", choices=sorted(ACCOUNTING_PRESETS), default="llama2-7b")
    p.add_argument("--config", help="attention config JSON instead of a preset")
    p.add_argument("--layers", type=int, default=0, help="layer count (0 = preset value)")
    p.add_argument("--base-params", type=float, default=0.0,
                   help="backbone parameter count (0 = preset value)")
    p.add_argument("--paper-layout", action="store_true",
                   help="emit the published table layout for diffing")
    common(p)
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("flops", help="forward-pass FLOPs breakdown table")
    p.add_argument("--preset", choices=sorted(ACCOUNTING_PRESETS), default="llama2-7b")
    p.add_argument("--contexts", help="comma-separated context lengths (default paper set)")
    p.add_argument("--segments", type=int, default=4, help="segments per context (S = T/n)")
    common(p)
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("gradcheck", help="reverse-mode vs. finite-difference gradients")
    p.add_argument("--config", help="attention config JSON (default: micro config)")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--causal", choices=["on", "off"])
    p.add_argument("--global-scope", choices=["all", "preceding"])
    common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("train", help="train the toy byte-level host LM")
    p.add_argument("--config", required=True, help="host config JSON")
    p.add_argument("--corpus", required=True, help="raw UTF-8/byte corpus file")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--causal", choices=["on", "off"])
    p.add_argument("--global-scope", choices=["all", "preceding"])
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-ppl", help="sliding-window perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--text", required=True, help="evaluation text file")
    p.add_argument("--eval-len", type=int, default=0, help="window length (0 = max_T)")
    p.add_argument("--stride", type=int, default=256)
    p.add_argument("--mode", choices=["hici", "full"], default="hici")
    p.add_argument("--causal", choices=["on", "off"])
    p.add_argument("--global-scope", choices=["all", "preceding"])
    common(p)
    p.set_defaults(func=_cmd_eval_ppl)

    p = sub.add_parser("attn-stats", help="attention-mass fractions per layer and head")
    p.add_argument("--ckpt", help="checkpoint directory")
    p.add_argument("--config", help="host config JSON (fresh init) instead of --ckpt")
    p.add_argument("--text", help="input text file (default: random bytes)")
    p.add_argument("--eval-len", type=int, default=0, help="input length (0 = max_T)")
    p.add_argument("--probe-uniform", action="store_true",
                   help="replace broadcast logits with zeros (analytic baseline)")
    p.add_argument("--causal", choices=["on", "off"])
    p.add_argument("--global-scope", choices=["all", "preceding"])
    common(p)
    p.set_defaults(func=_cmd_attn_stats)

    p = sub.add_parser("scaling", help="instrumented FLOPs across context lengths")
    p.add_argument("--config", help="attention config JSON (default: probe config)")
    p.add_argument("--t-list", help="comma-separated context lengths")
    p.add_argument("--causal", choices=["on", "off"])
    p.add_argument("--global-scope", choices=["all", "preceding"])
    common(p)
    p.set_defaults(func=_cmd_scaling)

    return parser


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ShapeError, GraphError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
