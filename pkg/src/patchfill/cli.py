"""Command-line entry point: training, reconstruction, inpainting, evaluation.

Configuration layering: built-in defaults, overridden by ``--config FILE``
(key=value lines), overridden by explicit flags. Every command echoes its
effective configuration before running and exits 0 on success; failures
print one ``error: <kind>: <message>`` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import imageio as IO
from . import metrics as M
from . import sampler as S
from . import tensor as T
from . import training
from .transformer import TokenTransformer, TransformerConfig
from .vqvae import PatchVQVAE, PVQVAEConfig

EVAL_BUCKETS = [("20-40", 0.2, 0.4), ("40-60", 0.4, 0.6), ("10-60", 0.1, 0.6)]


def _add_common(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="patchfill")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-pvqvae", help="train the patch VQ-VAE on an image corpus")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--codebook-size", type=int, default=None)
    p.add_argument("--codebook-size-masked", type=int, default=None)
    p.add_argument("--commitment-beta", type=float, default=None)
    p.add_argument("--lr-peak", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--mask-ratio-lo", type=float, default=None)
    p.add_argument("--mask-ratio-hi", type=float, default=None)
    p.add_argument("--relaxation", default=None, help="on|off")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("train-transformer", help="train the token predictor")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--vqvae", default=None, required=False)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--input-dim", type=int, default=None)
    p.add_argument("--mlp-ratio", type=float, default=None)
    p.add_argument("--lr-peak", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--mask-ratio-lo", type=float, default=None)
    p.add_argument("--mask-ratio-hi", type=float, default=None)

    p = sub.add_parser("inpaint", help="fill the masked region of one image")
    _add_common(p)
    p.add_argument("--vqvae", default=None)
    p.add_argument("--transformer", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--k1", default=None, help="patches per iteration, or 'all'")
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--n-samples", type=int, default=None)

    p = sub.add_parser("eval", help="metrics over a corpus, per mask-ratio bucket")
    _add_common(p)
    p.add_argument("--vqvae", default=None)
    p.add_argument("--transformer", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--k1", default=None)
    p.add_argument("--k2", type=int, default=None)

    p = sub.add_parser("reconstruct", help="autoencode an image through the codebook")
    _add_common(p)
    p.add_argument("--vqvae", default=None)
    p.add_argument("--image", default=None)

    p = sub.add_parser("codebook-stats", help="print codebook usage histograms")
    _add_common(p)
    p.add_argument("--vqvae", default=None)

    p = sub.add_parser("serve", help="run the inpainting HTTP service")
    _add_common(p)
    p.add_argument("--vqvae", default=None)
    p.add_argument("--transformer", default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


DEFAULTS = {
    "train-pvqvae": {
        "seed": 0, "out_dir": "out", "steps": 2000, "batch_size": 8,
        "patch_size": 8, "feature_dim": 256, "codebook_size": 8192,
        "codebook_size_masked": 1024, "commitment_beta": 0.25,
        "lr_peak": 3e-3, "warmup_steps": 100, "mask_ratio_lo": 0.2,
        "mask_ratio_hi": 0.5, "relaxation": "on", "resume": None, "corpus": None,
    },
    "train-transformer": {
        "seed": 0, "out_dir": "out", "steps": 500, "batch_size": 4,
        "depth": 2, "heads": 4, "input_dim": 64, "mlp_ratio": 4.0,
        "lr_peak": 3e-3, "warmup_steps": 50, "mask_ratio_lo": 0.2,
        "mask_ratio_hi": 0.5, "corpus": None, "vqvae": None,
    },
    "inpaint": {
        "seed": 0, "out_dir": "out", "vqvae": None, "transformer": None,
        "image": None, "mask": None, "k1": "20", "k2": 200, "n_samples": 1,
    },
    "eval": {
        "seed": 0, "out_dir": "out", "vqvae": None, "transformer": None,
        "corpus": None, "k1": "20", "k2": 200,
    },
    "reconstruct": {"seed": 0, "out_dir": "out", "vqvae": None, "image": None},
    "codebook-stats": {"seed": 0, "out_dir": "out", "vqvae": None},
    "serve": {
        "seed": 0, "out_dir": "out", "vqvae": None, "transformer": None,
        "host": "127.0.0.1", "port": 8321,
    },
}


def read_config_file(path):
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def effective_config(args):
    """defaults <- config file <- explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        file_vals = read_config_file(args.config)
        unknown = set(file_vals) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, val in file_vals.items():
            ref = cfg[key]
            if isinstance(ref, bool):
                cfg[key] = val.lower() in ("1", "true", "on", "yes")
            elif isinstance(ref, int):
                cfg[key] = int(val)
            elif isinstance(ref, float):
                cfg[key] = float(val)
            else:
                cfg[key] = val
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def echo_config(command, cfg):
    print(f"[{command}]")
    for key in sorted(cfg):
        print(f"{key}={cfg[key]}")


def _parse_k1(raw):
    if raw is None:
        return 20
    if isinstance(raw, int):
        return raw
    if str(raw).lower() == "all":
        return S.ALL
    return int(raw)


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise ValueError(f"missing required option --{key.replace('_', '-')}")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_train_pvqvae(cfg):
    _require(cfg, "corpus")
    images, _ = training.load_corpus(cfg["corpus"])
    h, w = images.shape[1:3]
    relax = str(cfg["relaxation"]).lower() in ("1", "true", "on", "yes")
    if cfg["resume"]:
        model = ckpt.load_vqvae(cfg["resume"])
        start = training.trained_steps(cfg["resume"])
    else:
        model_cfg = PVQVAEConfig(
            patch_size=cfg["patch_size"], feature_dim=cfg["feature_dim"],
            codebook_size=cfg["codebook_size"],
            codebook_size_masked=cfg["codebook_size_masked"],
            image_size=(h, w), commitment_beta=cfg["commitment_beta"],
        )
        model = PatchVQVAE(model_cfg, T.rng(cfg["seed"]))
        start = 0
    path, log = training.train_pvqvae(
        model, images, cfg["out_dir"], cfg["steps"], cfg["seed"],
        batch_size=cfg["batch_size"],
        mask_ratio=(cfg["mask_ratio_lo"], cfg["mask_ratio_hi"]),
        lr_peak=cfg["lr_peak"], warmup=cfg["warmup_steps"],
        relaxation=relax, start_step=start,
    )
    print(f"checkpoint={path}")
    print(f"log={log}")


def cmd_train_transformer(cfg):
    _require(cfg, "corpus", "vqvae")
    images, _ = training.load_corpus(cfg["corpus"])
    vqvae = ckpt.load_vqvae(cfg["vqvae"])
    model_cfg = TransformerConfig(
        depth=cfg["depth"], heads=cfg["heads"], grid=vqvae.config.grid,
        vocab=vqvae.config.codebook_size, feature_dim=vqvae.config.feature_dim,
        input_dim=cfg["input_dim"], mlp_ratio=cfg["mlp_ratio"],
    )
    model = TokenTransformer(model_cfg, T.rng(cfg["seed"]))
    path, log = training.train_transformer(
        model, vqvae, images, cfg["out_dir"], cfg["steps"], cfg["seed"],
        batch_size=cfg["batch_size"],
        mask_ratio=(cfg["mask_ratio_lo"], cfg["mask_ratio_hi"]),
        lr_peak=cfg["lr_peak"], warmup=cfg["warmup_steps"],
    )
    print(f"checkpoint={path}")
    print(f"log={log}")


def cmd_inpaint(cfg):
    _require(cfg, "vqvae", "transformer", "image", "mask")
    vqvae = ckpt.load_vqvae(cfg["vqvae"])
    transformer = ckpt.load_transformer(cfg["transformer"])
    image = IO.load_image(cfg["image"])
    mask = IO.load_mask(cfg["mask"])
    sampler_cfg = S.SamplerConfig(
        k1=_parse_k1(cfg["k1"]), k2=cfg["k2"],
        n_samples=cfg["n_samples"], seed=cfg["seed"],
    )
    result = S.inpaint(vqvae, transformer, image, mask, sampler_cfg)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    for i, (img, grid) in enumerate(zip(result.images, result.token_grids)):
        IO.save_image(img, os.path.join(cfg["out_dir"], f"sample_{i:02d}.png"))
        np.savetxt(
            os.path.join(cfg["out_dir"], f"tokens_{i:02d}.csv"),
            grid, fmt="%d", delimiter=",",
        )
    trace_path = os.path.join(cfg["out_dir"], "trace.json")
    with open(trace_path, "w") as fh:
        json.dump(
            {
                "masked_cells": result.masked_cells,
                "iterations": result.iterations,
                "filled": [
                    [[list(c) for c in it] for it in trace] for trace in result.traces
                ],
            },
            fh,
        )
    print(f"samples={len(result.images)}")
    print(f"iterations={result.iterations}")
    print(f"trace={trace_path}")


def cmd_eval(cfg):
    _require(cfg, "vqvae", "transformer", "corpus")
    vqvae = ckpt.load_vqvae(cfg["vqvae"])
    transformer = ckpt.load_transformer(cfg["transformer"])
    images, names = training.load_corpus(cfg["corpus"])
    h, w = images.shape[1:3]
    os.makedirs(cfg["out_dir"], exist_ok=True)
    report = os.path.join(cfg["out_dir"], "eval.csv")
    k1 = _parse_k1(cfg["k1"])
    fields = ["bucket", "image", "mask_ratio", "psnr", "ssim", "l1",
              "acc_at_max_prob", "prob_at_gt"]
    rows = []
    for bucket_idx, (bucket, lo, hi) in enumerate(EVAL_BUCKETS):
        for idx, name in enumerate(names):
            rng = T.rng((cfg["seed"], bucket_idx, idx))
            mask = IO.generate_mask(h, w, (lo, hi), rng)
            sampler_cfg = S.SamplerConfig(k1=k1, k2=cfg["k2"], n_samples=1,
                                          seed=cfg["seed"] + idx)
            result = S.inpaint(vqvae, transformer, images[idx], mask, sampler_cfg)
            quality = M.image_metrics(images[idx], result.images[0])
            session = S.start_session(vqvae, images[idx], mask, S.sample_rng(0, 0))
            probs = S.session_probs(session, vqvae, transformer)
            targets = vqvae.codebook.quantize(
                vqvae.encode(images[idx][None]).data,
                np.ones((1, *vqvae.config.grid, 1)), update_usage=False,
            ).tokens[0]
            tok = M.token_metrics(probs, targets, session.pending)
            rows.append({
                "bucket": bucket, "image": name,
                "mask_ratio": f"{IO.mask_ratio(mask):.4f}",
                "psnr": f"{quality['psnr']:.4f}", "ssim": f"{quality['ssim']:.6f}",
                "l1": f"{quality['l1']:.6f}",
                "acc_at_max_prob": f"{tok['acc_at_max_prob']:.6f}",
                "prob_at_gt": f"{tok['prob_at_gt']:.6f}",
            })
    with open(report, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"report={report}")


def cmd_reconstruct(cfg):
    _require(cfg, "vqvae", "image")
    vqvae = ckpt.load_vqvae(cfg["vqvae"])
    image = IO.load_image(cfg["image"])
    feats = vqvae.encode(image[None])
    ones = np.ones((1, *vqvae.config.grid, 1), dtype=np.float32)
    q = vqvae.quantize(feats, ones)
    recon = np.asarray(vqvae.decode_plain(q.vectors).data[0])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    out = os.path.join(cfg["out_dir"], "reconstruction.png")
    IO.save_image(recon, out)
    print(f"psnr={M.psnr(image, recon):.4f}")
    print(f"l1={M.l1(image, recon):.6f}")
    print(f"output={out}")


def cmd_codebook_stats(cfg):
    _require(cfg, "vqvae")
    vqvae = ckpt.load_vqvae(cfg["vqvae"])
    for label, usage in (
        ("unmasked", vqvae.codebook.usage),
        ("masked", vqvae.codebook.usage_masked),
    ):
        used = int((usage > 0).sum())
        total = int(usage.sum())
        print(f"{label}: rows={len(usage)} used={used} assignments={total}")


def cmd_serve(cfg):
    # environment supplies anything flags and config files left unset
    cfg["vqvae"] = cfg["vqvae"] or os.environ.get("PATCHFILL_VQVAE")
    cfg["transformer"] = cfg["transformer"] or os.environ.get("PATCHFILL_TRANSFORMER")
    if os.environ.get("PATCHFILL_PORT") and cfg["port"] == DEFAULTS["serve"]["port"]:
        cfg["port"] = int(os.environ["PATCHFILL_PORT"])
    if os.environ.get("PATCHFILL_HOST") and cfg["host"] == DEFAULTS["serve"]["host"]:
        cfg["host"] = os.environ["PATCHFILL_HOST"]
    _require(cfg, "vqvae", "transformer")
    import uvicorn

    from .service.app import create_app

    vqvae = ckpt.load_vqvae(cfg["vqvae"])
    transformer = ckpt.load_transformer(cfg["transformer"])
    app = create_app(vqvae, transformer)
    uvicorn.run(app, host=cfg["host"], port=cfg["port"], log_level="info")


COMMANDS = {
    "train-pvqvae": cmd_train_pvqvae,
    "train-transformer": cmd_train_transformer,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "codebook-stats": cmd_codebook_stats,
    "serve": cmd_serve,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        echo_config(args.command, cfg)
        COMMANDS[args.command](cfg)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
