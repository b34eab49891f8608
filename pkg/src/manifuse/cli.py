"""Experiment driver.

Subcommands cover dataset synthesis, single-denoiser runs, the full
manipulate/denoise/realign/fuse pipeline, the three trainers, ensemble
evaluation, PSD curves, and removed-noise heat maps. Every run is fully
determined by (config, seed): all randomness derives from the root seed
by hashing it with a stage name, per-item noise is keyed by image index,
and worker results merge in input order, so a --jobs 8 run emits the same
bytes as --jobs 1.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import auxloss, fusion, toydata
from .denoise import (DctThresholdDenoiser, DenoiserTrainConfig, Denoiser,
                      IdentityDenoiser, TinyDenoiser, train_denoiser)
from .freq import psd
from .image import add_awgn, extract_patches, psnr, read_pgm, removed_noise_heatmap, write_pgm
from .manip import ALL_MODE_IDS, DIHEDRAL_MODE_IDS, build_branch_stack
from .nn import load_params, save_params


class ValidationError(Exception):
    """Bad arguments, config, or input files: exit code 1."""


DEFAULTS = {
    "data": {"dir": "toy"},
    "noise": {"levels": "10,20,30,40,50", "sigma": "25", "clip": "true"},
    "modes": {"ids": "all"},
    "denoiser": {"kind": "tiny", "depth": "7", "width": "24", "model": "",
                 "epochs": "50", "batch_size": "8", "lr": "1e-3",
                 "patch_size": "32", "stride": "32", "dct_sigma": "25"},
    "fusion": {"levels": "10,20,30,40,50", "epochs": "100", "batch_size": "8",
               "lr": "0.01", "patch_size": "50", "stride": "50",
               "model": "", "model_dir": ""},
    "aux": {"mode": "l1", "weight": "0.1", "window": "10"},
    "psd": {"bins": "32"},
    "run": {"seed": "0", "jobs": "1"},
}


def derive_seed(root_seed: int, stage: str) -> int:
    """Stage sub-seed: sha256 of "root:stage", first 8 bytes, sign bit off."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def load_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path:
        if not os.path.isfile(path):
            raise ValidationError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ValidationError(f"bad config {path}: {exc}") from exc
    return cp


def _get_int(cp, section, key) -> int:
    try:
        return cp.getint(section, key)
    except ValueError as exc:
        raise ValidationError(f"[{section}] {key} must be an integer") from exc


def _get_float(cp, section, key) -> float:
    try:
        return cp.getfloat(section, key)
    except ValueError as exc:
        raise ValidationError(f"[{section}] {key} must be a number") from exc


def _get_bool(cp, section, key) -> bool:
    try:
        return cp.getboolean(section, key)
    except ValueError as exc:
        raise ValidationError(f"[{section}] {key} must be a boolean") from exc


def _get_levels(cp, section, key) -> list[float]:
    raw = cp.get(section, key)
    try:
        levels = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValidationError(f"[{section}] {key}: bad level list {raw!r}") from exc
    if not levels:
        raise ValidationError(f"[{section}] {key} is empty")
    return levels


def parse_modes(cp) -> list[int]:
    raw = cp.get("modes", "ids").strip().lower()
    if raw == "all":
        return list(ALL_MODE_IDS)
    if raw == "dihedral":
        return list(DIHEDRAL_MODE_IDS)
    try:
        ids = [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValidationError(f"[modes] ids: bad mode list {raw!r}") from exc
    if not ids:
        raise ValidationError("[modes] ids is empty")
    return ids


def prepare_out_dir(path: str, overwrite: bool) -> str:
    if os.path.isdir(path) and os.listdir(path) and not overwrite:
        raise ValidationError(
            f"output directory {path} is not empty (pass --overwrite to reuse)")
    os.makedirs(path, exist_ok=True)
    return path


def echo_config(cp, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config-resolved.ini"), "w") as fh:
        cp.write(fh)


def write_csv(path, fieldnames, rows) -> None:
    """Deterministic CSV: fixed column order, floats at 12 significant
    digits, LF newlines."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([
                f"{v:.12g}" if isinstance(v, float) else v
                for v in (row[k] for k in fieldnames)])


def ordered_map(fn, items, jobs: int) -> list:
    """Apply fn to items, possibly in a thread pool; results keep input
    order regardless of completion order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def load_images(cp) -> list[tuple[str, np.ndarray]]:
    src = cp.get("data", "dir")
    if src == "toy":
        return toydata.load_toy_dataset()
    if not os.path.isdir(src):
        raise ValidationError(f"dataset directory not found: {src}")
    names = sorted(n for n in os.listdir(src) if n.endswith(".pgm"))
    if not names:
        raise ValidationError(f"no .pgm images in {src}")
    out = []
    for name in names:
        try:
            out.append((name[:-4], read_pgm(os.path.join(src, name))))
        except Exception as exc:
            raise ValidationError(f"unreadable image {name}: {exc}") from exc
    return out


def build_denoiser(cp) -> Denoiser:
    kind = cp.get("denoiser", "kind")
    if kind == "identity":
        return IdentityDenoiser()
    if kind == "dct":
        return DctThresholdDenoiser(_get_float(cp, "denoiser", "dct_sigma"))
    if kind == "tiny":
        model_path = cp.get("denoiser", "model")
        if not model_path:
            raise ValidationError(
                "denoiser.kind=tiny needs denoiser.model "
                "(train one with the train-denoiser command)")
        if not os.path.isfile(model_path):
            raise ValidationError(f"denoiser model file not found: {model_path}")
        model = TinyDenoiser(_get_int(cp, "denoiser", "depth"),
                             _get_int(cp, "denoiser", "width"),
                             rng=np.random.default_rng(0))
        try:
            load_params(model, model_path)
        except ValueError as exc:
            raise ValidationError(f"cannot load {model_path}: {exc}") from exc
        model.eval()
        return model
    raise ValidationError(f"unknown denoiser.kind {kind!r}")


def _denoiser_patches(cp, images) -> np.ndarray:
    size = _get_int(cp, "denoiser", "patch_size")
    stride = _get_int(cp, "denoiser", "stride")
    patches = []
    for _, img in images:
        patches.extend(extract_patches(img, size, stride).patches)
    if not patches:
        raise ValidationError(
            f"no {size}x{size} patches: images too small for patch_size")
    return np.array(patches)


def _denoiser_train_config(cp, seed: int) -> DenoiserTrainConfig:
    return DenoiserTrainConfig(
        epochs=_get_int(cp, "denoiser", "epochs"),
        batch_size=_get_int(cp, "denoiser", "batch_size"),
        lr=_get_float(cp, "denoiser", "lr"),
        seed=seed)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(cp, args) -> None:
    images = load_images(cp)
    levels = _get_levels(cp, "noise", "levels")
    clip = _get_bool(cp, "noise", "clip")
    seed = derive_seed(args.seed, "synth")
    noisy_dir = os.path.join(args.out, "noisy")
    os.makedirs(noisy_dir, exist_ok=True)

    def make(task):
        i, (name, img), sigma = task
        noisy = add_awgn(img, sigma, seed, index=i)
        if clip:
            noisy = np.clip(noisy, 0.0, 1.0)
        return noisy

    tasks = [(i * len(levels) + j, pair, sigma)
             for i, pair in enumerate(images)
             for j, sigma in enumerate(levels)]
    results = ordered_map(make, tasks, args.jobs)
    rows = []
    for (idx, (name, _), sigma), noisy in zip(tasks, results):
        fname = f"{name}-s{sigma:g}.pgm"
        write_pgm(os.path.join(noisy_dir, fname), noisy)
        rows.append({"image": name, "sigma": sigma, "noise_index": idx,
                     "path": os.path.join("noisy", fname)})
    write_csv(os.path.join(args.out, "manifest.csv"),
              ["image", "sigma", "noise_index", "path"], rows)


def cmd_denoise(cp, args) -> None:
    images = load_images(cp)
    denoiser = build_denoiser(cp)
    out_dir = os.path.join(args.out, "denoised")
    os.makedirs(out_dir, exist_ok=True)
    results = ordered_map(lambda pair: denoiser.denoise(pair[1]), images,
                          args.jobs if denoiser.parallel_safe else 1)
    rows = []
    for (name, _), den in zip(images, results):
        fname = f"{name}.pgm"
        write_pgm(os.path.join(out_dir, fname), den)
        rows.append({"image": name, "denoiser": denoiser.name,
                     "path": os.path.join("denoised", fname)})
    write_csv(os.path.join(args.out, "manifest.csv"),
              ["image", "denoiser", "path"], rows)


def _load_fusion_model(path: str, n_branches: int) -> fusion.FusionModel:
    if not os.path.isfile(path):
        raise ValidationError(f"fusion model file not found: {path}")
    model = fusion.FusionModel(n_branches, rng=np.random.default_rng(0))
    try:
        load_params(model, path)
    except ValueError as exc:
        raise ValidationError(f"cannot load {path}: {exc}") from exc
    model.eval()
    return model


def cmd_pipeline(cp, args) -> None:
    images = load_images(cp)
    denoiser = build_denoiser(cp)
    mode_ids = parse_modes(cp)
    sigma = _get_float(cp, "noise", "sigma")
    seed = derive_seed(args.seed, "pipeline")
    fmodel = None
    if cp.get("fusion", "model"):
        fmodel = _load_fusion_model(cp.get("fusion", "model"), len(mode_ids))

    def build(task):
        i, (name, clean) = task
        noisy = np.clip(add_awgn(clean, sigma, seed, index=i), 0.0, 1.0)
        return noisy, build_branch_stack(noisy, denoiser, mode_ids)

    jobs = args.jobs if denoiser.parallel_safe else 1
    built = ordered_map(build, list(enumerate(images)), jobs)

    per_image = []
    heat_rows = []
    heat_dir = os.path.join(args.out, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    clean_set, noisy_set, den_set = [], [], []
    for (name, clean), (noisy, stack) in zip(images, built):
        scores = {
            "noisy": psnr(clean, noisy),
            "branch-0": psnr(clean, np.clip(stack.images[0], 0.0, 1.0)),
            "simple-average": psnr(clean, np.clip(stack.images.mean(axis=0), 0.0, 1.0)),
        }
        if fmodel is not None:
            from .autodiff import Tensor
            x = Tensor(stack.images[None])
            scores["spatial-only"] = psnr(clean, np.clip(fmodel.spatial_forward(x).values[0, 0], 0.0, 1.0))
            scores["channel-only"] = psnr(clean, np.clip(fmodel.channel_forward(x).values[0, 0], 0.0, 1.0))
            scores["dual-fusion"] = psnr(clean, np.clip(fmodel(x).values[0, 0], 0.0, 1.0))
        for strategy, value in scores.items():
            per_image.append({"image": name, "strategy": strategy,
                              "psnr_db": value})
        heat = removed_noise_heatmap([noisy], [stack.images[0]])
        peak = heat.max()
        write_pgm(os.path.join(heat_dir, f"{name}.pgm"),
                  heat / peak if peak > 0 else heat)
        heat_rows.append({"image": name, "mean_removed": float(heat.mean())})
        clean_set.append(clean)
        noisy_set.append(noisy)
        den_set.append(np.clip(stack.images[0], 0.0, 1.0))

    write_csv(os.path.join(args.out, "per-image.csv"),
              ["image", "strategy", "psnr_db"], per_image)
    strategies = []
    for row in per_image:
        if row["strategy"] not in strategies:
            strategies.append(row["strategy"])
    agg = []
    for strategy in strategies:
        vals = [r["psnr_db"] for r in per_image if r["strategy"] == strategy]
        agg.append({"strategy": strategy, "mean_psnr_db": float(np.mean(vals)),
                    "n_images": len(vals)})
    write_csv(os.path.join(args.out, "aggregate.csv"),
              ["strategy", "mean_psnr_db", "n_images"], agg)

    bins = _get_int(cp, "psd", "bins")
    psd_rows = []
    for series, group in (("clean", clean_set), ("noisy", noisy_set),
                          ("denoised-branch0", den_set)):
        curve = psd(group, n_bins=bins)
        for b, (radius, power) in enumerate(curve.rows()):
            psd_rows.append({"series": series, "bin": b, "radius": radius,
                             "power_db": power})
    write_csv(os.path.join(args.out, "psd.csv"),
              ["series", "bin", "radius", "power_db"], psd_rows)
    write_csv(os.path.join(args.out, "heatmap.csv"),
              ["image", "mean_removed"], heat_rows)


def cmd_train_denoiser(cp, args) -> None:
    images = load_images(cp)
    patches = _denoiser_patches(cp, images)
    seed = derive_seed(args.seed, "train-denoiser")
    model = TinyDenoiser(_get_int(cp, "denoiser", "depth"),
                         _get_int(cp, "denoiser", "width"),
                         rng=np.random.default_rng([seed, 0]))
    history = train_denoiser(model, patches, _denoiser_train_config(cp, seed))
    save_params(model, os.path.join(args.out, "denoiser.bin"))
    write_csv(os.path.join(args.out, "history.csv"),
              ["epoch", "lr", "train_loss", "val_psnr_db"],
              [vars(r) for r in history])


def cmd_train_fusion(cp, args) -> None:
    images = load_images(cp)
    denoiser = build_denoiser(cp)
    mode_ids = parse_modes(cp)
    levels = _get_levels(cp, "fusion", "levels")
    seed = derive_seed(args.seed, "train-fusion")
    fcfg_base = dict(
        epochs=_get_int(cp, "fusion", "epochs"),
        batch_size=_get_int(cp, "fusion", "batch_size"),
        lr=_get_float(cp, "fusion", "lr"),
        patch_size=_get_int(cp, "fusion", "patch_size"),
        stride=_get_int(cp, "fusion", "stride"))
    jobs = args.jobs if denoiser.parallel_safe else 1
    for li, sigma in enumerate(levels):
        stack_dir = os.path.join(args.out, "stacks", f"s{sigma:g}")
        os.makedirs(stack_dir, exist_ok=True)

        def build(task):
            i, (name, clean) = task
            noisy = np.clip(add_awgn(clean, sigma, seed, index=li * len(images) + i),
                            0.0, 1.0)
            return build_branch_stack(noisy, denoiser, mode_ids)

        stacks = ordered_map(build, list(enumerate(images)), jobs)
        samples = []
        for (name, clean), stack in zip(images, stacks):
            fusion.save_stack(os.path.join(stack_dir, f"{name}.stack"), stack)
            samples.append((stack, clean))
        model = fusion.FusionModel(len(mode_ids),
                                   rng=np.random.default_rng([seed, 1 + li]))
        cfg = fusion.FusionTrainConfig(seed=seed + li, **fcfg_base)
        history = fusion.train_fusion(model, samples, cfg)
        save_params(model, os.path.join(args.out, f"fusion-s{sigma:g}.bin"))
        write_csv(os.path.join(args.out, f"history-s{sigma:g}.csv"),
                  ["epoch", "lr", "train_loss", "val_psnr_db"],
                  [{k: v for k, v in vars(r).items() if k != "aux_loss"}
                   for r in history])


def cmd_train_aux(cp, args) -> None:
    images = load_images(cp)
    patches = _denoiser_patches(cp, images)
    seed = derive_seed(args.seed, "train-aux")
    mode = cp.get("aux", "mode")
    base = _denoiser_train_config(cp, seed)
    try:
        cfg = auxloss.AuxTrainConfig(
            **vars(base), mode=mode,
            aux_weight=_get_float(cp, "aux", "weight"),
            stability_window=_get_int(cp, "aux", "window"))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    depth = _get_int(cp, "denoiser", "depth")
    width = _get_int(cp, "denoiser", "width")
    denoiser = TinyDenoiser(depth, width, rng=np.random.default_rng([seed, 0]))
    if mode == "image":
        wrapped = auxloss.ImageLearningDenoiser(
            denoiser, rng=np.random.default_rng([seed, 4]))
        history = auxloss.train_image_learning_aux(wrapped, patches, cfg)
        save_params(wrapped, os.path.join(args.out, "denoiser-aux.bin"))
    else:
        estimator = auxloss.ErrorEstimator(rng=np.random.default_rng([seed, 3]))
        history = auxloss.train_with_auxiliary_loss(denoiser, estimator,
                                                    patches, cfg)
        save_params(denoiser, os.path.join(args.out, "denoiser-aux.bin"))
        save_params(estimator, os.path.join(args.out, "estimator.bin"))
    write_csv(os.path.join(args.out, "history.csv"),
              ["epoch", "psnr_db", "denoiser_loss", "aux_loss", "lr"],
              [{"epoch": r.epoch, "psnr_db": r.val_psnr_db,
                "denoiser_loss": r.train_loss, "aux_loss": r.aux_loss,
                "lr": r.lr} for r in history])
    score = auxloss.psnr_stability([r.val_psnr_db for r in history],
                                   cfg.stability_window)
    write_csv(os.path.join(args.out, "stability.csv"),
              ["config", "window", "score"],
              [{"config": mode, "window": cfg.stability_window, "score": score}])


def cmd_eval(cp, args) -> None:
    images = load_images(cp)
    denoiser = build_denoiser(cp)
    mode_ids = parse_modes(cp)
    levels = _get_levels(cp, "noise", "levels")
    seed = derive_seed(args.seed, "eval")
    model_dir = cp.get("fusion", "model_dir")
    jobs = args.jobs if denoiser.parallel_safe else 1
    rows = []
    for li, sigma in enumerate(levels):
        def build(task):
            i, (name, clean) = task
            noisy = np.clip(add_awgn(clean, sigma, seed, index=li * len(images) + i),
                            0.0, 1.0)
            return build_branch_stack(noisy, denoiser, mode_ids)

        stacks = ordered_map(build, list(enumerate(images)), jobs)
        samples = [(stack, clean) for (name, clean), stack in zip(images, stacks)]
        fmodel = None
        if model_dir:
            fmodel = _load_fusion_model(
                os.path.join(model_dir, f"fusion-s{sigma:g}.bin"), len(mode_ids))
        for row in fusion.evaluate_ensembles(samples, fmodel):
            rows.append({"noise_level": sigma, **row})
    write_csv(os.path.join(args.out, "results.csv"),
              ["noise_level", "strategy", "mean_psnr_db", "n_images"], rows)


def cmd_psd(cp, args) -> None:
    images = load_images(cp)
    sigma = _get_float(cp, "noise", "sigma")
    bins = _get_int(cp, "psd", "bins")
    seed = derive_seed(args.seed, "psd")
    groups = [("clean", [img for _, img in images])]
    if sigma > 0:
        noisy = [np.clip(add_awgn(img, sigma, seed, index=i), 0.0, 1.0)
                 for i, (_, img) in enumerate(images)]
        groups.append(("noisy", noisy))
    rows = []
    for series, group in groups:
        curve = psd(group, n_bins=bins)
        for b, (radius, power) in enumerate(curve.rows()):
            rows.append({"series": series, "bin": b, "radius": radius,
                         "power_db": power})
    write_csv(os.path.join(args.out, "psd.csv"),
              ["series", "bin", "radius", "power_db"], rows)


def cmd_heatmap(cp, args) -> None:
    images = load_images(cp)
    denoiser = build_denoiser(cp)
    sigma = _get_float(cp, "noise", "sigma")
    seed = derive_seed(args.seed, "heatmap")

    def run(task):
        i, (name, clean) = task
        noisy = np.clip(add_awgn(clean, sigma, seed, index=i), 0.0, 1.0)
        return noisy, denoiser.denoise(noisy)

    jobs = args.jobs if denoiser.parallel_safe else 1
    results = ordered_map(run, list(enumerate(images)), jobs)
    heat_dir = os.path.join(args.out, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    rows = []
    for (name, _), (noisy, den) in zip(images, results):
        heat = removed_noise_heatmap([noisy], [den])
        peak = heat.max()
        write_pgm(os.path.join(heat_dir, f"{name}.pgm"),
                  heat / peak if peak > 0 else heat)
        rows.append({"image": name, "mean_removed": float(heat.mean())})
    write_csv(os.path.join(args.out, "heatmap.csv"),
              ["image", "mean_removed"], rows)


COMMANDS = {
    "synth": cmd_synth,
    "denoise": cmd_denoise,
    "pipeline": cmd_pipeline,
    "train-denoiser": cmd_train_denoiser,
    "train-fusion": cmd_train_fusion,
    "train-aux": cmd_train_aux,
    "eval": cmd_eval,
    "psd": cmd_psd,
    "heatmap": cmd_heatmap,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="manifuse",
                     description="ensemble grayscale denoising experiments")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="INI config file (defaults built in)")
        p.add_argument("--seed", type=int, default=None,
                       help="root seed (default: [run] seed)")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker threads (default: [run] jobs)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true",
                       help="allow writing into a non-empty output directory")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ValidationError("a command is required (see --help)")
        cp = load_config(args.config)
        if args.seed is None:
            args.seed = _get_int(cp, "run", "seed")
        if args.jobs is None:
            args.jobs = _get_int(cp, "run", "jobs")
        if args.jobs < 1:
            raise ValidationError(f"--jobs must be >= 1, got {args.jobs}")
        cp.set("run", "seed", str(args.seed))
        cp.set("run", "jobs", str(args.jobs))
        prepare_out_dir(args.out, args.overwrite)
        echo_config(cp, args.out)
        COMMANDS[args.command](cp, args)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
