"""Command-line entry point: ingest, train, grid, predict, eval, codec, bdrate.

Configuration precedence is flags over a key=value config file over the
built-in presets.  Every run writes a JSON manifest (resolved settings,
input digests, seed) next to its outputs; two runs with equal manifests
produce equal outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, codec, evaluation, hevc, nn
from .checkpoint import load_checkpoint, save_checkpoint
from .context import extract_context_test, mask_sizes
from .errors import InvalidArgument
from .imageio import read_image_gray, read_pgm, write_pgm
from .metrics import psnr
from .models import FAMILY_CONV, FAMILY_FC, build_conv, build_fc, predict_block
from .training import (
    DECAY_GRID,
    FcDataset,
    LR_GRID,
    MaskPolicy,
    PRESETS,
    TrainingConfig,
    build_validation_samples,
    generate_fc_dataset,
    hyperparameter_grid,
    ingest_crops,
    load_crop_set,
    save_crop_set,
    train,
)

DEFAULT_SEED = 2024


def _seed_default() -> int:
    env = os.environ.get("PNNS_SEED")
    return int(env) if env else DEFAULT_SEED


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: Path, subcommand: str, config: dict, inputs: list[str], seed: int):
    manifest = {
        "subcommand": subcommand,
        "config": {k: v for k, v in sorted(config.items()) if v is not None},
        "inputs": {p: _sha256(p) for p in inputs if Path(p).is_file()},
        "seed": seed,
        "tool_version": __version__,
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve(args, key: str, file_cfg: dict, preset: dict, fallback=None, cast=None):
    """flags > config file > preset > fallback"""
    value = getattr(args, key.replace("-", "_"), None)
    if value is None:
        value = file_cfg.get(key)
        if value is not None and cast:
            value = cast(value)
    if value is None:
        value = preset.get(key.replace("-", "_"))
    if value is None:
        value = fallback
    return value


def _parse_mask_policy(text: str | None) -> MaskPolicy:
    if not text or text == "uniform":
        return MaskPolicy()
    if text.startswith("fixed:"):
        n0, n1 = (int(x) for x in text[len("fixed:") :].split(","))
        return MaskPolicy.fixed(n0, n1)
    raise InvalidArgument(f"mask policy {text!r} (use 'uniform' or 'fixed:N0,N1')")


def _image_paths(spec: str) -> list[str]:
    path = Path(spec)
    if path.is_dir():
        exts = (".pgm", ".ppm")
        return sorted(str(p) for p in path.iterdir() if p.suffix.lower() in exts)
    return [spec]


def _load_predictors(model_dir: str | None) -> codec.PredictorSet:
    if not model_dir:
        return codec.PredictorSet()
    return codec.PredictorSet.load_dir(model_dir)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_ingest(args) -> int:
    rng = np.random.default_rng(args.seed)
    paths = _image_paths(args.input)
    crop_set, skipped = ingest_crops(paths, crop_size=args.crop_size, rng=rng)
    manifest = save_crop_set(crop_set, args.out)
    for path in skipped:
        print(f"skipped (smaller than {args.crop_size}): {path}")
    print(f"{len(crop_set.crops)} crops -> {manifest} (alpha={crop_set.alpha:.4f})")
    _write_manifest(
        Path(args.out) / "run_manifest.json",
        "ingest",
        {"input": args.input, "out": args.out, "crop_size": args.crop_size},
        paths,
        args.seed,
    )
    return 0


def _training_config(args, file_cfg: dict) -> TrainingConfig:
    preset = PRESETS[args.preset] if args.preset else {}
    iterations = int(_resolve(args, "iterations", file_cfg, preset, 20000, int))
    milestones = _resolve(args, "milestones", file_cfg, preset, None)
    if isinstance(milestones, str):
        milestones = tuple(int(x) for x in milestones.split(","))
    if milestones is None:
        milestones = tuple(
            ms for ms in (iterations // 2, iterations * 3 // 4, iterations * 7 // 8) if ms > 0
        )
    noise = _resolve(args, "noise_qps", file_cfg, {}, None)
    if isinstance(noise, str):
        noise = tuple(int(x) for x in noise.split(","))
    return TrainingConfig(
        m=args.m,
        family=args.family,
        distortion=_resolve(args, "distortion", file_cfg, preset, "l2"),
        weight_decay=float(_resolve(args, "decay", file_cfg, preset, 5e-4, float)),
        learning_rate=_resolve(args, "lr", file_cfg, preset, None, float),
        iterations=iterations,
        milestones=milestones,
        batch_size=int(_resolve(args, "batch", file_cfg, preset, 100, int)),
        mask_policy=_parse_mask_policy(_resolve(args, "mask", file_cfg, preset, "uniform")),
        seed=args.seed,
        noise_qps=noise,
    )


def _build_network(family: str, m: int, seed: int, fc_width: int, channel_scale: float):
    rng = np.random.default_rng(seed)
    if family == FAMILY_FC:
        return build_fc(m, p=fc_width, rng=rng)
    return build_conv(m, rng=rng, channel_scale=channel_scale)


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _training_config(args, file_cfg)
    crop_set = load_crop_set(args.crops)
    net = _build_network(cfg.family, cfg.m, cfg.seed, args.fc_width, args.channel_scale)
    net.alpha = crop_set.alpha

    fc_dataset = None
    if cfg.family == FAMILY_FC:
        if args.fc_dataset and Path(args.fc_dataset).is_file():
            fc_dataset = FcDataset.load(args.fc_dataset)
        else:
            preset = PRESETS[args.preset] if args.preset else PRESETS["desk-scale"]
            size = args.fc_dataset_size or preset["fc_dataset_size"]
            path = args.fc_dataset or str(Path(args.out) / f"fc_dataset_m{cfg.m}.bin")
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            train_crops, _ = crop_set.split_validation(cfg.val_fraction)
            generate_fc_dataset(
                train_crops,
                cfg.m,
                size,
                cfg.mask_policy,
                np.random.default_rng(cfg.seed + 1),
                path,
                noise_qps=cfg.noise_qps,
            )
            print(f"generated offline dataset: {path} ({size} samples)")
            fc_dataset = FcDataset.load(path)

    t0 = time.perf_counter()
    result = train(net, cfg, crop_set=crop_set, fc_dataset=fc_dataset, out_dir=args.out)
    print(
        f"trained {cfg.family} m={cfg.m} for {cfg.iterations} iterations "
        f"in {time.perf_counter() - t0:.1f}s; validation {result.final_validation_psnr:.2f} dB"
    )
    for path in result.checkpoints:
        print(f"checkpoint: {path}")
    _write_manifest(
        Path(args.out) / "run_manifest.json",
        "train",
        {**vars(args), "resolved": str(cfg)},
        [args.crops] if Path(args.crops).is_file() else [],
        cfg.seed,
    )
    return 0


def _cmd_grid(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _training_config(args, file_cfg)
    crop_set = load_crop_set(args.crops)
    lrs = tuple(float(x) for x in args.lrs.split(",")) if args.lrs else LR_GRID
    lams = tuple(float(x) for x in args.lams.split(",")) if args.lams else DECAY_GRID

    fc_dataset = None
    train_crops, val_crops = crop_set.split_validation(cfg.val_fraction)
    if cfg.family == FAMILY_FC:
        path = str(Path(args.out) / f"fc_dataset_m{cfg.m}.bin")
        Path(args.out).mkdir(parents=True, exist_ok=True)
        size = args.fc_dataset_size or 20000
        generate_fc_dataset(
            train_crops, cfg.m, size, cfg.mask_policy, np.random.default_rng(cfg.seed + 1), path
        )
        fc_dataset = FcDataset.load(path)
    val_samples = build_validation_samples(val_crops, cfg.m, count=128)

    def factory():
        net = _build_network(cfg.family, cfg.m, cfg.seed, args.fc_width, args.channel_scale)
        net.alpha = crop_set.alpha
        return net

    (best_lr, best_lam), rows = hyperparameter_grid(
        cfg, lrs, lams, factory, crop_set=crop_set, fc_dataset=fc_dataset,
        validation_samples=val_samples,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["learning_rate", "weight_decay", "validation_psnr"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"best: lr={best_lr} decay={best_lam} -> {out / 'grid.csv'}")
    _write_manifest(out / "run_manifest.json", "grid", vars(args), [], cfg.seed)
    return 0


def _cmd_predict(args) -> int:
    net = load_checkpoint(args.model)
    image = read_image_gray(args.image)
    m = net.spec.m
    ctx = extract_context_test(image, (args.row, args.col), m, args.n0, args.n1, net.alpha)
    if ctx is None:
        print("context out of bounds: zero prediction")
        pred = np.zeros((m, m))
    else:
        pred = predict_block(net, ctx)
    write_pgm(args.out, np.clip(np.round(pred), 0, 255).astype(np.uint8))
    target = image[args.row : args.row + m, args.col : args.col + m]
    if target.shape == (m, m):
        print(f"prediction PSNR vs source block: {psnr(target, pred):.2f} dB")
    _write_manifest(
        Path(args.out).with_suffix(".manifest.json"),
        "predict",
        vars(args),
        [args.model, args.image],
        args.seed,
    )
    return 0


def _load_models_by_label(paths: list[str]) -> dict:
    nets = {}
    for path in paths:
        net = load_checkpoint(path)
        nets[Path(path).stem] = net
    return nets


def _parse_mask_grid(text: str, m: int) -> list[tuple[int, int]]:
    if text == "corners":
        return [(0, 0), (0, m), (m, 0), (m, m)]
    grid = []
    for part in text.split(";"):
        n0, n1 = (int(x) for x in part.split(","))
        grid.append((n0, n1))
    return grid


def _cmd_eval_psnr(args) -> int:
    nets = _load_models_by_label(args.models)
    ms = {net.spec.m for net in nets.values()}
    if len(ms) != 1:
        raise InvalidArgument("all models in one sweep must share the block width")
    m = ms.pop()
    images = [read_image_gray(p) for p in _image_paths(args.images)]
    rng = np.random.default_rng(args.seed)
    samples = evaluation.build_eval_samples(images, m, args.count, rng)
    matrix = evaluation.prediction_psnr_suite(nets, samples, _parse_mask_grid(args.masks, m))
    evaluation.write_mask_matrix(args.out, matrix)
    for i, row in enumerate(matrix.rows):
        cells = ", ".join(f"{lbl}={matrix.cells[i, j]:.2f}" for j, lbl in enumerate(matrix.columns))
        print(f"test mask {row}: {cells}")
    _write_manifest(
        Path(args.out).with_suffix(".manifest.json"), "eval-psnr", vars(args), args.models, args.seed
    )
    return 0


def _cmd_eval_mu(args) -> int:
    net = load_checkpoint(args.model)
    images = [read_image_gray(p) for p in _image_paths(args.images)]
    rng = np.random.default_rng(args.seed)
    samples = evaluation.build_eval_samples(images, net.spec.m, args.count, rng)
    mu = evaluation.success_rate_mu(net, samples, args.n0, args.n1)
    print(f"success rate mu (m={net.spec.m}, mask=({args.n0},{args.n1})): {mu:.4f}")
    return 0


def _cmd_encode(args) -> int:
    image = read_image_gray(args.input)
    predictors = _load_predictors(args.model_dir)
    data, recon, stats = codec.encode_image(image, args.qp, args.scheme, predictors)
    Path(args.out).write_bytes(data)
    if args.recon:
        write_pgm(args.recon, recon)
    if args.nu:
        evaluation.write_nu_table(args.nu, codec.mode_frequency_nu(stats))
    print(
        f"{args.input}: {stats.bits} bits ({stats.bpp:.4f} bpp), "
        f"reconstruction {stats.psnr_db:.2f} dB -> {args.out}"
    )
    _write_manifest(
        Path(args.out).with_suffix(".manifest.json"), "encode", vars(args), [args.input], args.seed
    )
    return 0


def _cmd_decode(args) -> int:
    data = Path(args.input).read_bytes()
    predictors = _load_predictors(args.model_dir)
    recon = codec.decode_image(data, predictors)
    write_pgm(args.out, recon)
    print(f"decoded {args.input} -> {args.out} ({recon.shape[1]}x{recon.shape[0]})")
    return 0


def _read_curve_csv(path: str) -> list[evaluation.RdPoint]:
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            points.append(
                evaluation.RdPoint(rate=float(row["rate_bpp"]), psnr=float(row["psnr_db"]))
            )
    return points


def _cmd_bdrate(args) -> int:
    a = _read_curve_csv(args.curve_a)
    b = _read_curve_csv(args.curve_b)
    print(f"{evaluation.bjontegaard(a, b):.3f}%")
    return 0


def _cmd_selfcheck(args) -> int:
    ok = True

    def report(name: str, passed: bool, detail: str = "") -> None:
        nonlocal ok
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}{':  ' + detail if detail else ''}")

    rng = np.random.default_rng(7)

    # gradient checks, one small case per layer kind
    worst = 0.0
    for kind, params, make_x in (
        (nn.KIND_FC, nn.init_params(nn.KIND_FC, rng=rng, in_dim=6, out_dim=5), lambda r: r.normal(size=6)),
        (nn.KIND_CONV, nn.init_params(nn.KIND_CONV, rng=rng, kernel=3, c_in=2, c_out=2), lambda r: r.normal(size=(4, 4, 2))),
        (nn.KIND_TCONV, nn.init_params(nn.KIND_TCONV, rng=rng, kernel=5, c_in=2, c_out=2, stride=2), lambda r: r.normal(size=(3, 3, 2))),
    ):
        for seed in range(3):
            r = np.random.default_rng(seed)
            x = make_x(r)
            out, cache = nn.forward(kind, x, params, with_cache=True)
            dout = r.normal(size=out.shape)
            dx, _, _ = nn.backward(kind, dout, cache)
            num = nn.numerical_gradient(
                lambda v: float((nn.forward(kind, v, params) * dout).sum()), np.array(x)
            )
            worst = max(worst, nn.max_relative_error(dx, num))
    report("gradient checks (fc/conv/tconv)", worst < 1e-4, f"max rel err {worst:.2e}")

    # adjoint identity
    w = rng.normal(size=(5, 5, 2, 3))
    conv_p = nn.LayerParams(nn.KIND_CONV, w, np.zeros(3), stride=2, activation=nn.ACT_NONE)
    tconv_p = nn.LayerParams(nn.KIND_TCONV, w, np.zeros(2), stride=2, activation=nn.ACT_NONE)
    x = rng.normal(size=(8, 8, 2))
    y = rng.normal(size=(4, 4, 3))
    lhs = float((nn.conv2d_forward(x, conv_p) * y).sum())
    rhs = float((x * nn.tconv2d_forward(y, tconv_p)).sum())
    report("conv/tconv adjoint identity", abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs)))

    # transform inversion
    block = rng.normal(size=(8, 8)) * 100
    err = float(np.abs(codec.idct2(codec.dct2(block)) - block).max())
    report("DCT -> IDCT identity", err <= 1e-9, f"max err {err:.2e}")

    # switch codeword round trips, all schemes and MPM contexts
    from .bitio import BitReader, BitWriter

    mode_ok = True
    for scheme in codec.SCHEMES:
        space = list(range(35)) + ([codec.PNNS_MODE] if scheme == codec.SCHEME_SWITCH else [])
        for left in (None, 0, 1, 10, 18, 34):
            for above in (None, 1, 26, 33):
                mpms = codec.derive_mpm(left, above, scheme)
                for mode in space:
                    bw = BitWriter()
                    codec.write_mode(bw, mode, mpms, scheme)
                    if bw.bits_written != codec.mode_code_length(mode, mpms, scheme):
                        mode_ok = False
                    got = codec.read_mode(BitReader(bw.getvalue()), mpms, scheme)
                    mode_ok = mode_ok and got == mode
    report("mode codeword round trips", mode_ok)

    # MPM enumeration: 3 distinct, never the learned mode under switch
    mpm_ok = True
    neighbor_space = [None, *range(35), codec.PNNS_MODE]
    for left in neighbor_space:
        for above in neighbor_space:
            for scheme in codec.SCHEMES:
                if scheme != codec.SCHEME_SWITCH and codec.PNNS_MODE in (left, above):
                    continue
                mpms = codec.derive_mpm(left, above, scheme)
                if len(set(mpms)) != 3 or codec.PNNS_MODE in mpms:
                    mpm_ok = False
    report("MPM derivation (distinct, learned-mode free)", mpm_ok)

    # coefficient coder fuzz
    coeff_ok = True
    for n in (4, 8, 16, 32):
        for _ in range(200):
            levels = (rng.normal(0, 4, (n, n)) * (rng.random((n, n)) < 0.25)).astype(np.int64)
            bw = BitWriter()
            codec.code_coefficients(bw, levels)
            coeff_ok = coeff_ok and bw.bits_written == codec.coefficient_bits(levels)
            back = codec.decode_coefficients(BitReader(bw.getvalue()), n)
            coeff_ok = coeff_ok and (back == levels).all()
    report("coefficient coder round trips", coeff_ok)

    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnns",
        description="Block prediction lab: learned intra predictors plus a simplified intra codec",
    )
    parser.add_argument("--seed", type=int, default=_seed_default(), help="master RNG seed")
    parser.add_argument("--threads", type=int, default=os.cpu_count(), help="worker cap for data pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="crop a directory of images into a training set")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop-size", type=int, default=320)
    p.set_defaults(fn=_cmd_ingest)

    for name, fn in (("train", _cmd_train), ("grid", _cmd_grid)):
        p = sub.add_parser(name, help=f"{name} networks on an ingested crop set")
        p.add_argument("--crops", required=True, help="crop directory or manifest file")
        p.add_argument("--m", type=int, required=True)
        p.add_argument("--family", choices=(FAMILY_FC, FAMILY_CONV), required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", choices=tuple(PRESETS))
        p.add_argument("--iterations", type=int)
        p.add_argument("--milestones")
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--decay", type=float)
        p.add_argument("--distortion", choices=("l2", "l1"))
        p.add_argument("--mask", help="'uniform' or 'fixed:N0,N1'")
        p.add_argument("--noise-qps", help="e.g. 32,37,42 to train on coded contexts")
        p.add_argument("--fc-dataset", help="offline dataset path (fc family)")
        p.add_argument("--fc-dataset-size", type=int)
        p.add_argument("--fc-width", type=int, default=1200)
        p.add_argument("--channel-scale", type=float, default=1.0)
        if name == "grid":
            p.add_argument("--lrs", help="comma-separated learning rates")
            p.add_argument("--lams", help="comma-separated decay values")
        p.set_defaults(fn=fn)

    p = sub.add_parser("predict", help="predict one block of an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--col", type=int, required=True)
    p.add_argument("--n0", type=int, default=0)
    p.add_argument("--n1", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("eval-psnr", help="mask-matrix prediction PSNR sweep")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--count", type=int, default=960)
    p.add_argument("--masks", default="corners", help="'corners' or 'n0,n1;n0,n1;...'")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval_psnr)

    p = sub.add_parser("eval-mu", help="success rate against the 35 reference modes")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--count", type=int, default=960)
    p.add_argument("--n0", type=int, default=0)
    p.add_argument("--n1", type=int, default=0)
    p.set_defaults(fn=_cmd_eval_mu)

    p = sub.add_parser("encode", help="encode a grayscale image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--qp", type=int, required=True)
    p.add_argument("--scheme", choices=codec.SCHEMES, default=codec.SCHEME_BASELINE)
    p.add_argument("--model-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--recon", help="also write the encoder reconstruction as PGM")
    p.add_argument("--nu", help="write the mode-frequency table as CSV")
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("bdrate", help="Bjontegaard rate saving between two curve CSVs")
    p.add_argument("--a", dest="curve_a", required=True)
    p.add_argument("--b", dest="curve_b", required=True)
    p.set_defaults(fn=_cmd_bdrate)

    p = sub.add_parser("selfcheck", help="run the built-in verification suites")
    p.set_defaults(fn=_cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
