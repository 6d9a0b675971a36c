"""Experiment orchestration over a run directory.

Stages: prepare -> invert -> train -> evaluate -> analyze-phi -> report.
Each stage reads the manifest copied into the run directory and only its
own inputs, so stages are isolated and individually re-runnable.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import degradations as deg
from . import fusion, metrics, phinet, priors, toydata
from .imagestack import (
    CS_GRAY,
    CS_LAB,
    CS_RGB,
    Image,
    RANGE_CENTERED,
    RANGE_UNIT,
    denormalize,
    lab_to_rgb,
    load_array,
    load_image,
    normalize,
    rgb_to_lab,
    save_array,
    save_image,
    save_phi_map,
)

MANIFEST_SCHEMA = "runmanifest/1"

TASKS = ("colorization", "inpainting-central", "inpainting-random", "awgn-blind")

AB_SCALE = 128.0  # maps conventional a/b ranges into roughly [-1, 1] for training

METRIC_COLUMNS = ("id", "task", "psnr", "ssim", "auc", "mean_phi", "sigma_n", "prior_psnr")


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def default_manifest(task: str = "awgn-blind") -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "task": task,
        "dataset": {"kind": "toy", "count": 300, "image_size": 64,
                    "train_fraction": 0.667},
        "task_params": {"patch": 16} if task.startswith("inpainting") else {},
        "prior_backend": {"kind": "dictionary", "atoms": 32, "topk": None},
        "inversion_preset": "denoising-desk",
        "phinet": {"depth": 8, "width": 32, "kernel": 3},
        "train": asdict(phinet.TrainConfig()),
        "seed": 0,
    }


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    validate_manifest(manifest)
    return manifest


def save_manifest(manifest: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def validate_manifest(manifest: dict) -> None:
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise StageError("manifest", f"unsupported schema {manifest.get('schema')!r}")
    if manifest.get("task") not in TASKS:
        raise StageError("manifest", f"unknown task {manifest.get('task')!r}")
    backend = manifest.get("prior_backend", {})
    if backend.get("kind") not in ("gaussian", "dictionary", "generator"):
        raise StageError("manifest", f"unknown prior backend {backend.get('kind')!r}")
    ds = manifest.get("dataset", {})
    if ds.get("kind") not in ("toy", "dir"):
        raise StageError("manifest", f"unknown dataset kind {ds.get('kind')!r}")


def _run_manifest_path(run_dir: Path) -> Path:
    return Path(run_dir) / "manifest.json"


def _load_run_manifest(run_dir, stage: str) -> dict:
    path = _run_manifest_path(Path(run_dir))
    if not path.exists():
        raise StageError(stage, f"no manifest in run dir {run_dir}; run prepare first")
    return load_manifest(path)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _load_dataset(manifest: dict):
    ds = manifest["dataset"]
    seed = int(manifest["seed"])
    if ds["kind"] == "toy":
        images = toydata.toy_dataset(int(ds["count"]), int(ds["image_size"]),
                                     seed=seed)
    else:
        root = Path(ds["path"])
        paths = sorted(p for p in root.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise StageError("prepare", f"no images found in {root}")
        images = []
        for p in paths:
            img = load_image(p)
            if img.colorspace != CS_RGB:
                img = Image(np.repeat(img.data, 3, axis=0), img.value_range, CS_RGB)
            images.append(Image(img.data / 255.0, RANGE_UNIT, CS_RGB))
    if not images:
        raise StageError("prepare", "empty dataset")
    train, test = toydata.split_dataset(images, float(ds["train_fraction"]), seed)
    if not train or not test:
        raise StageError("prepare", "degenerate split: a partition is empty")
    return train, test


def cmd_prepare(manifest: dict, run_dir) -> None:
    """Materialize clean splits and degraded observations on disk."""
    validate_manifest(manifest)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, _run_manifest_path(run_dir))
    train, test = _load_dataset(manifest)

    task = manifest["task"]
    seed = int(manifest["seed"])
    meta = {"task": task, "splits": {}}
    for split, images in (("train", train), ("test", test)):
        clean_dir = run_dir / "data" / split
        obs_dir = run_dir / "data" / f"{split}_obs"
        clean_dir.mkdir(parents=True, exist_ok=True)
        obs_dir.mkdir(parents=True, exist_ok=True)
        split_meta = []
        for i, img in enumerate(images):
            name = f"{i:04d}"
            save_image(clean_dir / f"{name}.png",
                       Image(img.data * 255.0, "raw", CS_RGB))
            rng = np.random.default_rng([seed, 1 if split == "train" else 2, i])
            entry = {"id": name}
            obs = _degrade(task, manifest, img, rng, run_dir, split, name, entry)
            save_array(obs_dir / f"{name}.pfaf", obs.data)
            split_meta.append(entry)
        meta["splits"][split] = split_meta
    with open(run_dir / "data" / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _degrade(task, manifest, img, rng, run_dir, split, name, entry) -> Image:
    """Return the stored-space observation and record per-image parameters."""
    centered = Image(img.data - 0.5, RANGE_CENTERED, CS_RGB)
    if task == "awgn-blind":
        sigma = deg.sample_blind_sigma(rng)
        entry["sigma_n"] = sigma
        return deg.add_awgn(centered, sigma, rng)
    if task in ("inpainting-central", "inpainting-random"):
        h, w = img.data.shape[1:]
        if task == "inpainting-central":
            patch = int(manifest.get("task_params", {}).get("patch", 16))
            mask = deg.central_mask(h, w, patch)
        else:
            mask = deg.sample_random_masks(h, w, rng)
        mask_dir = Path(run_dir) / "data" / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        from PIL import Image as PILImage

        PILImage.fromarray((mask.data * 255).astype(np.uint8), mode="L").convert("1") \
            .save(mask_dir / f"{split}_{name}.png")
        save_array(mask_dir / f"{split}_{name}.pfaf", mask.data.astype(np.float32))
        entry["mask"] = f"masks/{split}_{name}.png"
        return deg.apply_mask(centered, mask)
    # colorization: the observation is the CIELAB luminance channel
    return deg.degrade_colorization(img)


def _load_split(run_dir: Path, split: str):
    """Yield (id, clean unit-RGB image, stored-space observation, entry)."""
    meta_path = run_dir / "data" / "meta.json"
    if not meta_path.exists():
        raise StageError("data", f"no prepared data in {run_dir}; run prepare first")
    with open(meta_path) as fh:
        meta = json.load(fh)
    task = meta["task"]
    for entry in meta["splits"][split]:
        name = entry["id"]
        clean_raw = load_image(run_dir / "data" / split / f"{name}.png")
        clean = Image(clean_raw.data / 255.0, RANGE_UNIT, CS_RGB)
        obs_data = load_array(run_dir / "data" / f"{split}_obs" / f"{name}.pfaf")
        if task == "colorization":
            obs = Image(obs_data, RANGE_UNIT, CS_GRAY, check_bounds=False)
        else:
            obs = Image(obs_data, RANGE_CENTERED, CS_RGB, check_bounds=False)
        yield name, clean, obs, entry


# ---------------------------------------------------------------------------
# invert (prior precomputation)
# ---------------------------------------------------------------------------

def _fidelity_image(task: str, obs: Image) -> Image:
    """Lift the stored observation into output space via the bijective
    companion, in the task's working space."""
    if task == "colorization":
        rgb = deg.g_inverse_colorization(obs)
        return rgb_to_lab(rgb)
    return deg.g_inverse_identity(obs)


def _fit_backend(manifest: dict, run_dir: Path, stage: str):
    """Fit (or load) the prior backend on the clean training split."""
    backend = manifest["prior_backend"]
    task = manifest["task"]
    train_imgs = []
    for _, clean, _, _ in _load_split(run_dir, "train"):
        if task == "colorization":
            train_imgs.append(rgb_to_lab(clean))
        else:
            train_imgs.append(Image(clean.data - 0.5, RANGE_CENTERED, CS_RGB))
    if backend["kind"] == "gaussian":
        stack = np.stack([im.data for im in train_imgs]).astype(np.float64)
        mean = Image(stack.mean(axis=0), train_imgs[0].value_range,
                     train_imgs[0].colorspace, check_bounds=False)
        std = stack.std(axis=0)
        return priors.GaussianPixelPrior(mean, std)
    if backend["kind"] == "dictionary":
        atoms = int(backend.get("atoms", 32))
        prior = priors.fit_dictionary(train_imgs, atoms)
        priors.save_dictionary(prior, run_dir / "priors" / "dictionary")
        return prior
    # generator backend: a small decoder pre-trained as an autoencoder
    # decoder on the clean training split, then frozen
    return _fit_generator(manifest, run_dir, train_imgs, stage)


def _fit_generator(manifest, run_dir: Path, train_imgs, stage):
    backend = manifest["prior_backend"]
    task = manifest["task"]
    if task == "colorization":
        raise StageError(stage, "generator backend supports awgn and inpainting "
                                "tasks; use the dictionary or gaussian backend "
                                "for colorization")
    size = train_imgs[0].data.shape[1]
    gen = priors.tiny_conv_generator(
        latent_dim=int(backend.get("latent_dim", 16)),
        base_channels=int(backend.get("base_channels", 16)),
        out_channels=3, image_size=size,
        split_layer=int(backend.get("split_layer", 2)),
        seed=int(manifest["seed"]))
    epochs = int(backend.get("decoder_epochs", 30))
    _pretrain_decoder(gen, train_imgs, epochs, seed=int(manifest["seed"]))
    return gen


def _pretrain_decoder(gen: priors.MultiCodeGenerator, train_imgs, epochs: int,
                      seed: int) -> None:
    """Train per-image latent codes jointly with the decoder weights (a
    decoder-only autoencoder), then freeze the weights again."""
    for p in gen.stage1.parameters():
        p.requires_grad_(True)
    for p in gen.stage2.parameters():
        p.requires_grad_(True)
    gen.stage1.train()
    gen.stage2.train()
    torch.manual_seed(seed)
    xs = torch.from_numpy(np.stack([im.data for im in train_imgs]))
    codes = torch.randn(len(train_imgs), gen.latent_dim, requires_grad=True)
    params = list(gen.stage1.parameters()) + list(gen.stage2.parameters())
    opt = torch.optim.Adam([{"params": params, "lr": 1e-3},
                            {"params": [codes], "lr": 1e-2}])
    n = len(train_imgs)
    batch = 16
    for _ in range(epochs):
        perm = torch.randperm(n)
        for b in range(0, n, batch):
            idx = perm[b:b + batch]
            opt.zero_grad()
            out = gen.stage2(gen.stage1(codes[idx]))
            loss = torch.mean((out - xs[idx]) ** 2)
            loss.backward()
            opt.step()
    for p in params:
        p.requires_grad_(False)
    gen.stage1.eval()
    gen.stage2.eval()


def _forward_map(task: str, entry: dict, run_dir: Path, split: str):
    """Differentiable degradation model for generator inversion."""
    if task == "awgn-blind":
        return lambda t: t
    if task in ("inpainting-central", "inpainting-random"):
        mask = load_array(run_dir / "data" / "masks" / f"{split}_{entry['id']}.pfaf")
        keep = torch.from_numpy((1.0 - mask).astype(np.float32))
        return lambda t: t * keep
    raise StageError("invert", f"no differentiable forward map for task {task}")


def cmd_invert(manifest: dict, run_dir) -> None:
    """Compute and store the prior projection for every observation.

    Resumable: items whose projection file already exists are skipped.
    """
    run_dir = Path(run_dir)
    manifest = dict(manifest)
    task = manifest["task"]
    (run_dir / "priors").mkdir(exist_ok=True)
    backend_obj = _fit_backend(manifest, run_dir, "invert")
    backend_kind = manifest["prior_backend"]["kind"]

    for split in ("train", "test"):
        out_dir = run_dir / "priors" / split
        out_dir.mkdir(parents=True, exist_ok=True)
        losses_path = out_dir / "losses.json"
        losses = json.loads(losses_path.read_text()) if losses_path.exists() else {}
        for name, clean, obs, entry in _load_split(run_dir, split):
            out_path = out_dir / f"{name}.pfaf"
            if out_path.exists() and name in losses:
                continue
            fid = _fidelity_image(task, obs)
            if backend_kind == "gaussian":
                proj = backend_obj.mean_image
                loss = float(np.sum((proj.data - fid.data) ** 2))
            elif backend_kind == "dictionary":
                topk = manifest["prior_backend"].get("topk")
                proj = priors.project_dictionary(backend_obj, fid,
                                                 None if topk is None else int(topk))
                loss = float(np.sum((proj.data - fid.data) ** 2))
            else:
                cfg = priors.inversion_preset(
                    manifest.get("inversion_preset", "denoising-desk"),
                    seed=int(manifest["seed"]))
                fwd = _forward_map(task, entry, run_dir, split)
                target = Image(obs.data, RANGE_CENTERED, CS_RGB, check_bounds=False)
                result = priors.invert(backend_obj, target, fwd, cfg)
                proj, loss = result.projection, result.final_loss
            save_array(out_path, proj.data)
            losses[name] = loss
            losses_path.write_text(json.dumps(losses, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _net_channels(task: str) -> tuple:
    if task == "colorization":
        return 1, 2  # luminance in, a/b fusion weights out
    return 3, 3


def _net_input(task: str, obs: Image) -> Image:
    if task == "colorization":
        return Image(obs.data / 100.0 - 0.5, RANGE_CENTERED, CS_GRAY,
                     check_bounds=False)
    return obs


def _build_samples(run_dir: Path, task: str, split: str):
    samples = []
    names = []
    for name, clean, obs, entry in _load_split(run_dir, split):
        prior_path = run_dir / "priors" / split / f"{name}.pfaf"
        if not prior_path.exists():
            raise StageError("train", f"missing prior projection {prior_path}")
        prior_data = load_array(prior_path)
        fid = _fidelity_image(task, obs)
        if task == "colorization":
            gt_lab = rgb_to_lab(clean)
            sample = phinet.TrainSample(
                observation=_net_input(task, obs),
                prior_img=_ab_image(prior_data),
                target=_ab_image(gt_lab.data),
                fidelity=_ab_image(fid.data))
        else:
            sample = phinet.TrainSample(
                observation=obs,
                prior_img=Image(prior_data, RANGE_CENTERED, CS_RGB,
                                check_bounds=False),
                target=Image(clean.data - 0.5, RANGE_CENTERED, CS_RGB),
                fidelity=fid)
        samples.append(sample)
        names.append(name)
    return names, samples


def _ab_image(lab_data: np.ndarray) -> "_RawGrid":
    """Scaled (a, b) channels for training; the Image container only admits
    1- or 3-channel grids, so the 2-channel pair travels as a raw grid."""
    return _RawGrid(np.asarray(lab_data)[1:] / AB_SCALE)


class _RawGrid:
    """Minimal stand-in carrying a bare (C, H, W) grid through the trainer
    for channel counts the Image container does not admit."""

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float32)

    @property
    def shape(self):
        return self.data.shape


def cmd_train(manifest: dict, run_dir) -> None:
    """Train the fusion-map network on the training split."""
    run_dir = Path(run_dir)
    task = manifest["task"]
    cfg = phinet.TrainConfig(**manifest["train"])
    ckpt_dir = run_dir / "checkpoints" / "final"
    if ckpt_dir.exists():
        _, _, epoch, _, _ = phinet.load_checkpoint(ckpt_dir)
        if epoch >= cfg.epochs:
            return
    _, samples = _build_samples(run_dir, task, "train")
    if not samples:
        raise StageError("train", "no training samples")
    in_ch, out_ch = _net_channels(task)
    net_params = manifest.get("phinet", {})
    torch.manual_seed(cfg.seed)  # body-layer init must not depend on RNG history
    net = phinet.PhiNet(phinet.PhiNetConfig(
        depth=int(net_params.get("depth", 8)),
        width=int(net_params.get("width", 32)),
        kernel=int(net_params.get("kernel", 3)),
        in_channels=in_ch, out_channels=out_ch))
    try:
        net, history, momentum = phinet.train(net, samples, cfg)
    except phinet.TrainingDiverged as exc:
        raise StageError("train", str(exc)) from exc
    phinet.save_checkpoint(ckpt_dir, net, cfg, cfg.epochs, history, momentum)
    with open(run_dir / "checkpoints" / "history.json", "w") as fh:
        json.dump(history, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return "-"
    if value == float("inf"):
        return "inf"
    return f"{value:.6f}"


def _to_unit_rgb(task: str, img_data: np.ndarray) -> Image:
    """Map a working-space output back to unit RGB for metric evaluation."""
    if task == "colorization":
        lab = Image(np.asarray(img_data, dtype=np.float64),
                    RANGE_UNIT, CS_LAB, check_bounds=False)
        return lab_to_rgb(lab)
    return Image(np.clip(np.asarray(img_data) + 0.5, 0.0, 1.0), RANGE_UNIT, CS_RGB,
                 check_bounds=False)


def cmd_evaluate(manifest: dict, run_dir) -> None:
    """Fused outputs, fusion maps, and the metric table for the test split."""
    run_dir = Path(run_dir)
    task = manifest["task"]
    ckpt_dir = run_dir / "checkpoints" / "final"
    if not ckpt_dir.exists():
        raise StageError("evaluate", f"missing checkpoint {ckpt_dir}")
    net, _, _, _, _ = phinet.load_checkpoint(ckpt_dir)

    eval_dir = run_dir / "eval"
    for sub in ("fused", "phi", "hallucination"):
        (eval_dir / sub).mkdir(parents=True, exist_ok=True)

    rows = []
    variant_rows = []
    agg = {"psnr": [], "ssim": [], "auc": [], "mean_phi": [],
           "prior_psnr": [], "fidelity_psnr": []}
    for name, clean, obs, entry in _load_split(run_dir, "test"):
        prior_path = run_dir / "priors" / "test" / f"{name}.pfaf"
        if not prior_path.exists():
            raise StageError("evaluate", f"missing prior projection {prior_path}")
        prior_data = load_array(prior_path)
        fid = _fidelity_image(task, obs)
        phi = phinet.predict_phi(net, _net_input(task, obs))

        if task == "colorization":
            gt_lab = rgb_to_lab(clean)
            prior_lab = Image(prior_data, RANGE_UNIT, CS_LAB, check_bounds=False)
            fused = fusion.fuse_colorization(obs, phi.data, prior_lab, fid)
            outputs = {"fused": fused.data, "prior": prior_data, "fidelity": fid.data}
            scores = {}
            for variant, data in outputs.items():
                rgb = _to_unit_rgb(task, data)
                curve = metrics.auc_colorization(np.asarray(data)[1:], gt_lab.data[1:])
                scores[variant] = (metrics.psnr(rgb, clean, peak=1.0),
                                   metrics.ssim(rgb, clean, peak=1.0), curve.auc)
            fused_out = _to_unit_rgb(task, fused.data)
        else:
            fin = fusion.FusionInput(observation=fid, phi=phi,
                                     prior_img=Image(prior_data, RANGE_CENTERED,
                                                     CS_RGB, check_bounds=False))
            fused = fusion.fuse(fin)
            outputs = {"fused": fused.data, "prior": prior_data, "fidelity": fid.data}
            scores = {}
            for variant, data in outputs.items():
                rgb = _to_unit_rgb(task, data)
                scores[variant] = (metrics.psnr(rgb, clean, peak=1.0),
                                   metrics.ssim(rgb, clean, peak=1.0), None)
            fused_out = _to_unit_rgb(task, fused.data)

        save_image(eval_dir / "fused" / f"{name}.png",
                   Image(fused_out.data * 255.0, "raw", CS_RGB))
        save_phi_map(eval_dir / "phi" / f"{name}.pfaf", phi,
                     eval_dir / "phi" / f"{name}.png")
        report = fusion.hallucination_report(phi)
        (eval_dir / "hallucination" / f"{name}.txt").write_text(
            fusion.format_hallucination_report(report))

        mean_phi = report["global_mean"]
        sigma = entry.get("sigma_n")
        p, s, auc = scores["fused"]
        prior_psnr = scores["prior"][0]
        rows.append((name, task, p, s, auc, mean_phi, sigma, prior_psnr))
        for variant in ("fused", "prior", "fidelity"):
            vp, vs, vauc = scores[variant]
            variant_rows.append((name, variant, vp, vs, vauc))
        agg["psnr"].append(p)
        agg["ssim"].append(s)
        if auc is not None:
            agg["auc"].append(auc)
        agg["mean_phi"].append(mean_phi)
        agg["prior_psnr"].append(prior_psnr)
        agg["fidelity_psnr"].append(scores["fidelity"][0])

    if not rows:
        raise StageError("evaluate", "empty test split")

    lines = ["\t".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append("\t".join([row[0], row[1]] + [_fmt(v) for v in row[2:]]))
    lines.append("\t".join(
        ["mean", task, _fmt(float(np.mean(agg["psnr"]))),
         _fmt(float(np.mean(agg["ssim"]))),
         _fmt(float(np.mean(agg["auc"])) if agg["auc"] else None),
         _fmt(float(np.mean(agg["mean_phi"]))), "-",
         _fmt(float(np.mean(agg["prior_psnr"])))]))
    (eval_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")

    vlines = ["\t".join(("id", "variant", "psnr", "ssim", "auc"))]
    for row in variant_rows:
        vlines.append("\t".join([row[0], row[1]] + [_fmt(v) for v in row[2:]]))
    vlines.append("\t".join(["mean", "fidelity",
                             _fmt(float(np.mean(agg["fidelity_psnr"]))), "-", "-"]))
    (eval_dir / "variants.tsv").write_text("\n".join(vlines) + "\n")


def read_metric_table(run_dir):
    """Rows of eval/metrics.tsv as dicts (aggregate row included, id 'mean')."""
    path = Path(run_dir) / "eval" / "metrics.tsv"
    if not path.exists():
        raise StageError("evaluate", f"no metric table at {path}")
    lines = path.read_text().strip().split("\n")
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        row = dict(zip(header, vals))
        for key in ("psnr", "ssim", "auc", "mean_phi", "sigma_n", "prior_psnr"):
            if row[key] == "-":
                row[key] = None
            elif row[key] == "inf":
                row[key] = float("inf")
            else:
                row[key] = float(row[key])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# analyze-phi
# ---------------------------------------------------------------------------

def cmd_analyze_phi(manifest: dict, run_dir) -> metrics.PhiAnalysis:
    """Correlate per-image mean fusion weight with the noise level and with
    the prior's quality; emit scatter data and plots."""
    run_dir = Path(run_dir)
    if manifest["task"] != "awgn-blind":
        raise StageError("analyze-phi", f"analysis requires the awgn-blind task, "
                                        f"got {manifest['task']!r}")
    rows = [r for r in read_metric_table(run_dir) if r["id"] != "mean"]
    records = [(r["mean_phi"], r["sigma_n"], r["prior_psnr"]) for r in rows]
    try:
        analysis = metrics.analyze_phi(records)
    except (ValueError, metrics.DegenerateVariance) as exc:
        raise StageError("analyze-phi", str(exc)) from exc

    plots_dir = run_dir / "plots"
    plots_dir.mkdir(exist_ok=True)
    for fname, xs_key, ys in (("phi_vs_sigma", 1, None), ("phi_vs_priorpsnr", 2, None)):
        data_lines = [f"{rec[xs_key]:.6f}\t{rec[0]:.6f}" for rec in analysis.per_image]
        (plots_dir / f"{fname}.txt").write_text("\n".join(data_lines) + "\n")
    _scatter_plot(plots_dir / "phi_vs_sigma.png",
                  [r[1] for r in analysis.per_image],
                  [r[0] for r in analysis.per_image],
                  "noise sigma (8-bit units)", "mean fusion weight",
                  analysis.r_phi_sigma)
    _scatter_plot(plots_dir / "phi_vs_priorpsnr.png",
                  [r[2] for r in analysis.per_image],
                  [r[0] for r in analysis.per_image],
                  "prior PSNR (dB)", "mean fusion weight",
                  analysis.r_phi_priorpsnr)
    (plots_dir / "analysis.txt").write_text(
        f"r_phi_sigma {analysis.r_phi_sigma:.6f}\n"
        f"r_phi_priorpsnr {analysis.r_phi_priorpsnr:.6f}\n"
        f"n {len(analysis.per_image)}\n")
    return analysis


def _scatter_plot(path, xs, ys, xlabel, ylabel, r) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(xs, ys, s=12, alpha=0.7)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(f"Pearson r = {r:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(run_dir) -> str:
    """Consolidated run report; byte-stable for identical inputs."""
    run_dir = Path(run_dir)
    manifest = _load_run_manifest(run_dir, "report")
    eval_dir = run_dir / "eval"
    if not (eval_dir / "metrics.tsv").exists():
        raise StageError("report", f"no evaluated run in {run_dir}")

    parts = ["# Run report", "", "## Manifest", "```json",
             json.dumps(manifest, indent=1, sort_keys=True), "```", "",
             "## Metrics", "```",
             (eval_dir / "metrics.tsv").read_text().rstrip(), "```", "",
             "## Variants", "```",
             (eval_dir / "variants.tsv").read_text().rstrip(), "```", ""]

    hall_dir = eval_dir / "hallucination"
    means = []
    for path in sorted(hall_dir.glob("*.txt")):
        first = path.read_text().split("\n", 1)[0]
        means.append(f"{path.stem}\t{first.split()[1]}")
    parts += ["## Hallucination (global mean per image)", "```"] + means + ["```", ""]

    missing_plots = []
    if manifest["task"] == "awgn-blind":
        parts.append("## Plots")
        for fname in ("phi_vs_sigma.png", "phi_vs_priorpsnr.png"):
            path = run_dir / "plots" / fname
            if path.exists():
                parts.append(f"- plots/{fname}")
            else:
                parts.append(f"- MISSING plots/{fname}")
                missing_plots.append(fname)
        parts.append("")

    text = "\n".join(parts)
    (run_dir / "report.md").write_text(text)
    if missing_plots:
        raise StageError("report", f"missing plots: {', '.join(missing_plots)}")
    return text


def run_pipeline(manifest: dict, run_dir, with_analysis: bool | None = None) -> None:
    """Convenience: prepare, invert, train, evaluate (and analyze for the
    blind-noise task), then report."""
    cmd_prepare(manifest, run_dir)
    cmd_invert(manifest, run_dir)
    cmd_train(manifest, run_dir)
    cmd_evaluate(manifest, run_dir)
    if with_analysis is None:
        with_analysis = manifest["task"] == "awgn-blind"
    if with_analysis:
        cmd_analyze_phi(manifest, run_dir)
    cmd_report(run_dir)
