"""CLI: config layering, training commands, inpainting, eval, error paths."""

import os

import numpy as np
import pytest

from patchfill import cli
from patchfill import imageio as IO
from patchfill import tensor as T
from patchfill.checkpoint import load_vqvae

from toydata import patch_mask, tiled_images


def write_corpus(tmp_path, n=4, size=16, seed=0):
    d = tmp_path / "corpus"
    d.mkdir(exist_ok=True)
    images = tiled_images(n, size, 4, seed=seed, bank_size=8)
    for i, img in enumerate(images):
        IO.save_image(img, d / f"img_{i:02d}.png")
    return d, images


TRAIN_ARGS = [
    "--steps", "12", "--batch-size", "2", "--patch-size", "4",
    "--feature-dim", "16", "--codebook-size", "16", "--codebook-size-masked", "4",
    "--mask-ratio-lo", "0.1", "--mask-ratio-hi", "0.5",
]


def test_config_layering(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("steps=77\nbatch-size=3\n")
    args = cli.build_parser().parse_args(
        ["train-pvqvae", "--config", str(cfg_file), "--batch-size", "5"]
    )
    cfg = cli.effective_config(args)
    assert cfg["steps"] == 77  # file beats default
    assert cfg["batch_size"] == 5  # flag beats file
    assert cfg["patch_size"] == 8  # default survives


def test_config_file_unknown_key_rejected(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("bogus=1\n")
    args = cli.build_parser().parse_args(["train-pvqvae", "--config", str(cfg_file)])
    with pytest.raises(ValueError, match="bogus"):
        cli.effective_config(args)


def test_train_pvqvae_and_resume(tmp_path, capsys):
    corpus, _ = write_corpus(tmp_path)
    out = tmp_path / "out"
    rc = cli.main(["train-pvqvae", "--corpus", str(corpus), "--out-dir", str(out),
                   *TRAIN_ARGS])
    assert rc == 0
    text = capsys.readouterr().out
    assert "steps=12" in text  # effective config echoed
    ckpt = out / "pvqvae.ckpt"
    log = out / "pvqvae_train.csv"
    assert ckpt.exists() and log.exists()
    header = log.read_text().splitlines()[0]
    assert header.startswith("step,loss,recon,codebook,commit,tau")

    out2 = tmp_path / "out2"
    rc = cli.main(["train-pvqvae", "--corpus", str(corpus), "--out-dir", str(out2),
                   "--resume", str(ckpt), *TRAIN_ARGS])
    assert rc == 0
    rows = (out2 / "pvqvae_train.csv").read_text().splitlines()[1:]
    first_step = int(rows[0].split(",")[0])
    assert first_step == 12  # counter continues

    model = load_vqvae(out2 / "pvqvae.ckpt")
    assert (model.codebook.usage > 0).sum() > 1  # no full collapse


def test_train_transformer_freezes_vqvae(tmp_path, capsys):
    corpus, _ = write_corpus(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["train-pvqvae", "--corpus", str(corpus), "--out-dir", str(out),
                     *TRAIN_ARGS]) == 0
    vq_path = out / "pvqvae.ckpt"
    before = load_vqvae(vq_path).param_hash()
    rc = cli.main([
        "train-transformer", "--corpus", str(corpus), "--vqvae", str(vq_path),
        "--out-dir", str(out), "--steps", "8", "--batch-size", "2",
        "--depth", "1", "--heads", "2", "--input-dim", "16",
        "--mask-ratio-lo", "0.1", "--mask-ratio-hi", "0.5",
    ])
    assert rc == 0
    assert load_vqvae(vq_path).param_hash() == before
    log = out / "transformer_train.csv"
    assert log.read_text().splitlines()[0] == "step,loss,masked_cells,lr"
    assert (out / "transformer.ckpt").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_models")
    corpus, images = write_corpus(tmp)
    out = tmp / "models"
    assert cli.main(["train-pvqvae", "--corpus", str(corpus), "--out-dir", str(out),
                     *TRAIN_ARGS]) == 0
    assert cli.main([
        "train-transformer", "--corpus", str(corpus),
        "--vqvae", str(out / "pvqvae.ckpt"), "--out-dir", str(out),
        "--steps", "8", "--batch-size", "2", "--depth", "1", "--heads", "2",
        "--input-dim", "16", "--mask-ratio-lo", "0.1", "--mask-ratio-hi", "0.5",
    ]) == 0
    return corpus, images, out / "pvqvae.ckpt", out / "transformer.ckpt", tmp


def test_inpaint_empty_mask_copies_input(trained, tmp_path):
    _, images, vq, tr, _ = trained
    img_path = tmp_path / "input.png"
    IO.save_image(images[0], img_path)
    mask_path = tmp_path / "mask.png"
    IO.save_mask(np.ones((16, 16, 1), np.float32), mask_path)
    out = tmp_path / "fill"
    rc = cli.main(["inpaint", "--vqvae", str(vq), "--transformer", str(tr),
                   "--image", str(img_path), "--mask", str(mask_path),
                   "--out-dir", str(out), "--k1", "4", "--k2", "2"])
    assert rc == 0
    assert (out / "sample_00.png").read_bytes() == img_path.read_bytes()
    import json

    trace = json.loads((out / "trace.json").read_text())
    assert trace["iterations"] == 0 and trace["filled"] == [[]]


def test_inpaint_replay_and_one_iteration_all(trained, tmp_path):
    _, images, vq, tr, _ = trained
    img_path = tmp_path / "input.png"
    IO.save_image(images[1], img_path)
    mask = patch_mask(16, 16, 4, T.rng(5), frac=0.5)
    mask_path = tmp_path / "mask.png"
    IO.save_mask(mask, mask_path)

    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["inpaint", "--vqvae", str(vq), "--transformer", str(tr),
                       "--image", str(img_path), "--mask", str(mask_path),
                       "--out-dir", str(out), "--k1", "2", "--k2", "3",
                       "--n-samples", "2", "--seed", "7"])
        assert rc == 0
        outs.append((out / "sample_00.png").read_bytes())
    assert outs[0] == outs[1]

    out = tmp_path / "allmode"
    rc = cli.main(["inpaint", "--vqvae", str(vq), "--transformer", str(tr),
                   "--image", str(img_path), "--mask", str(mask_path),
                   "--out-dir", str(out), "--k1", "all", "--k2", "1"])
    assert rc == 0
    import json

    trace = json.loads((out / "trace.json").read_text())
    assert trace["iterations"] == 1
    assert len(trace["filled"][0]) == 1


def test_eval_buckets_and_determinism(trained, tmp_path):
    corpus, _, vq, tr, _ = trained

    def run(name):
        out = tmp_path / name
        rc = cli.main(["eval", "--vqvae", str(vq), "--transformer", str(tr),
                       "--corpus", str(corpus), "--out-dir", str(out),
                       "--k1", "all", "--k2", "1", "--seed", "3"])
        assert rc == 0
        return (out / "eval.csv").read_bytes()

    a, b = run("e1"), run("e2")
    assert a == b
    lines = a.decode().splitlines()
    assert lines[0].startswith("bucket,image,mask_ratio,psnr,ssim,l1")
    buckets = {row.split(",")[0] for row in lines[1:]}
    assert buckets == {"20-40", "40-60", "10-60"}
    for row in lines[1:]:
        bucket, _, ratio = row.split(",")[:3]
        lo, hi = {"20-40": (0.2, 0.4), "40-60": (0.4, 0.6), "10-60": (0.1, 0.6)}[bucket]
        assert lo <= float(ratio) <= hi


def test_reconstruct_and_codebook_stats(trained, tmp_path, capsys):
    _, images, vq, _, _ = trained
    img_path = tmp_path / "r.png"
    IO.save_image(images[2], img_path)
    out = tmp_path / "rec"
    rc = cli.main(["reconstruct", "--vqvae", str(vq), "--image", str(img_path),
                   "--out-dir", str(out)])
    assert rc == 0
    assert (out / "reconstruction.png").exists()
    text = capsys.readouterr().out
    assert "psnr=" in text

    rc = cli.main(["codebook-stats", "--vqvae", str(vq)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "unmasked: rows=16" in text and "masked: rows=4" in text


def test_error_path_machine_parsable(tmp_path, capsys):
    rc = cli.main(["train-pvqvae", "--corpus", str(tmp_path / "missing"), "--steps", "1"])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert err.count("\n") == 1
