"""Command-line entry point.

Configuration is an INI file with one section per component; any key can be
overridden with ``--set section.key=value``. Exit codes: 0 success, 1 runtime
failure, 2 bad flags or config.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from . import checkpoint, evaluation, trainer
from .ar_model import ArCfg, NextScaleTransformer, SamplingCfg
from .autoencoder import Autoencoder, AutoencoderCfg, train_tokenizer
from .codec import decompose, write_token_stream
from .degradation import PRESETS, degrade
from .imageio import read_image, write_image
from .inference import latent_distance, pathway_replace_generate, super_resolve
from .numerics import Rng
from .schedule import ScaleSchedule, ScheduleError, infinity_default_schedule, validate
from .transform_net import TransformNet

log = logging.getLogger("nsarm")

COMMANDS = (
    "make-data",
    "train-tokenizer",
    "pretrain-ar",
    "train-stage1",
    "train-stage2",
    "infer",
    "pathway",
    "decompose",
    "eval-images",
    "eval-scores",
    "report-robustness",
)

DEFAULTS = {
    "paths": {"data_dir": "data", "checkpoint_dir": "checkpoints", "output_dir": "out"},
    "schedule": {"preset": "64"},
    "data": {"n_images": "512", "n_train": "448", "degradation": "mild"},
    "tokenizer": {"width": "64", "epochs": "20", "learning_rate": "2e-3", "batch_size": "16"},
    "ar": {"model_dim": "128", "depth": "4", "heads": "4"},
    "tnet": {"width": "64"},
    "pretrain_ar": {"learning_rate": "1e-3", "batch_size": "16", "iterations": "400"},
    "stage1": {"learning_rate": "1e-3", "batch_size": "16", "iterations": "1500"},
    "stage2": {"learning_rate": "3e-4", "batch_size": "16", "iterations": "200"},
    "sampling": {"mode": "greedy", "temperature": "1.0", "seed": "0"},
    "run": {"seed": "0"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_dir: Path
    checkpoint_dir: Path
    output_dir: Path
    schedule: ScaleSchedule
    n_images: int
    n_train: int
    degradation: str
    tokenizer: dict
    ar: ArCfg
    tnet_width: int
    train: dict
    sampling: SamplingCfg
    seed: int

    def describe(self) -> dict:
        return {
            "paths": {k: str(getattr(self, k)) for k in ("data_dir", "checkpoint_dir", "output_dir")},
            "schedule": self.schedule.to_config(),
            "data": {"n_images": self.n_images, "n_train": self.n_train, "degradation": self.degradation},
            "tokenizer": self.tokenizer,
            "ar": asdict(self.ar),
            "tnet": {"width": self.tnet_width},
            "train": {k: v.to_dict() for k, v in self.train.items()},
            "sampling": asdict(self.sampling),
            "seed": self.seed,
        }


def _parse_schedule(sec: configparser.SectionProxy) -> ScaleSchedule:
    if "scales" in sec:
        sched = ScaleSchedule.from_config(sec)
        validate(sched, sched.latent_shape)
        return sched
    return infinity_default_schedule(int(sec.get("preset", "64")), int(sec["d"]) if "d" in sec else None)


def load_config(path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value)
    known = set(DEFAULTS)
    unknown = [s for s in cp.sections() if s not in known]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    try:
        p, d = cp["paths"], cp["data"]
        sched = _parse_schedule(cp["schedule"])
        if d["degradation"] not in PRESETS:
            raise ConfigError(f"unknown degradation preset {d['degradation']!r}; choose from {sorted(PRESETS)}")
        run_seed = seed if seed is not None else cp["run"].getint("seed")
        train = {}
        for stage, key in (("pretrain_ar", "pretrain_ar"), ("stage1", "stage1"), ("stage2", "stage2")):
            train[key] = trainer.TrainCfg.from_dict({"stage": stage, "seed": str(run_seed), **dict(cp[key])})
        tok = cp["tokenizer"]
        tok_cfg = {
            "width": tok.getint("width"),
            "epochs": tok.getint("epochs"),
            "learning_rate": tok.getfloat("learning_rate"),
            "batch_size": tok.getint("batch_size"),
        }
        if tok_cfg["epochs"] < 0 or tok_cfg["learning_rate"] <= 0 or tok_cfg["batch_size"] < 1:
            raise ConfigError("invalid tokenizer settings")
        a = cp["ar"]
        ar = ArCfg(a.getint("model_dim"), a.getint("depth"), a.getint("heads"))
        s = cp["sampling"]
        sampling = SamplingCfg(s["mode"], s.getfloat("temperature"), s.getint("seed"))
        n_images, n_train = d.getint("n_images"), d.getint("n_train")
        if not 1 <= n_train <= n_images:
            raise ConfigError("need 1 <= n_train <= n_images")
        return RunConfig(
            Path(p["data_dir"]),
            Path(p["checkpoint_dir"]),
            Path(p["output_dir"]),
            sched,
            n_images,
            n_train,
            d["degradation"],
            tok_cfg,
            ar,
            cp["tnet"].getint("width"),
            train,
            sampling,
            run_seed,
        )
    except ConfigError:
        raise
    except (ValueError, KeyError, ScheduleError) as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- artifacts


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _manifest_path(cfg: RunConfig) -> Path:
    return cfg.data_dir / "manifest.csv"


def _read_manifest(cfg: RunConfig, split: str | None = None) -> list[dict]:
    path = _manifest_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run make-data first")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r for r in rows if split is None or r["split"] == split]


def _load_pairs(cfg: RunConfig, split: str) -> tuple[list[str], torch.Tensor, torch.Tensor]:
    rows = _read_manifest(cfg, split)
    if not rows:
        raise ValueError(f"no {split} images in manifest")
    gt = torch.stack([read_image(cfg.data_dir / r["gt"]) for r in rows])
    lr = torch.stack([read_image(cfg.data_dir / r["lr"]) for r in rows])
    return [r["image_id"] for r in rows], gt, lr


def _ckpt(cfg: RunConfig, name: str) -> Path:
    return cfg.checkpoint_dir / f"{name}.nsrm"


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"schedule": cfg.schedule.to_config(), **extra}


def _load_tokenizer(cfg: RunConfig) -> Autoencoder:
    tensors, meta = checkpoint.load(_ckpt(cfg, "tokenizer"))
    ae = Autoencoder(AutoencoderCfg(**meta["autoencoder"]))
    checkpoint.load_into("ae", ae, tensors)
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    return ae


def _load_ar(cfg: RunConfig, name: str) -> NextScaleTransformer:
    tensors, meta = checkpoint.load(_ckpt(cfg, name))
    ar = NextScaleTransformer(ScaleSchedule.from_config(meta["schedule"]), ArCfg(**meta["ar"]))
    checkpoint.load_into("ar", ar, tensors)
    return ar.eval()


def _load_tnet(cfg: RunConfig, name: str) -> TransformNet:
    tensors, meta = checkpoint.load(_ckpt(cfg, name))
    tnet = TransformNet(ScaleSchedule.from_config(meta["schedule"]), meta["tnet_width"])
    checkpoint.load_into("tnet", tnet, tensors)
    tnet.stage1_done = bool(meta.get("stage1_done", False))
    return tnet.eval()


def _latents(cfg: RunConfig, gt: torch.Tensor) -> torch.Tensor:
    return trainer.encode_dataset(_load_tokenizer(cfg), gt)


def _write_log(cfg: RunConfig, name: str, history) -> None:
    checkpoint.atomic_write(cfg.output_dir / f"{name}_log.csv", trainer.log_csv(history))


# ---------------------------------------------------------------- commands


def cmd_make_data(cfg: RunConfig, args) -> None:
    from .degradation import make_toy_dataset

    side = cfg.schedule.image_shape
    if side[0] != side[1]:
        raise ValueError("toy data needs a square schedule")
    rng = Rng(cfg.seed)
    images = make_toy_dataset(cfg.n_images, side[0], rng.child("toy"))
    deg = PRESETS[cfg.degradation]
    if deg.scale_factor != cfg.schedule.sr_factor:
        raise ValueError("degradation scale factor differs from the schedule's SR factor")
    rows = [["image_id", "split", "gt", "lr"]]
    for i, img in enumerate(images):
        iid = f"{i:04d}"
        split = "train" if i < cfg.n_train else "test"
        lr = degrade(img, deg, rng.child(f"degrade{i}"))
        write_image(cfg.data_dir / "gt" / f"{iid}.ppm", img)
        write_image(cfg.data_dir / "lr" / f"{iid}.ppm", lr)
        rows.append([iid, split, f"gt/{iid}.ppm", f"lr/{iid}.ppm"])
    checkpoint.atomic_write(_manifest_path(cfg), _csv(rows))


def cmd_train_tokenizer(cfg: RunConfig, args) -> None:
    _, gt, _ = _load_pairs(cfg, "train")
    t = cfg.tokenizer
    ae_cfg = AutoencoderCfg(d=cfg.schedule.d, factor=cfg.schedule.factor, width=t["width"])
    rng = Rng(cfg.seed).child("tokenizer")
    model = Autoencoder(ae_cfg, rng.child("init"))
    model, hist = train_tokenizer(gt, cfg.schedule, t["epochs"], rng, model, t["learning_rate"], t["batch_size"])
    checkpoint.save(_ckpt(cfg, "tokenizer"), {"ae": model}, _meta(cfg, autoencoder=asdict(ae_cfg)))
    records = [trainer.StepRecord(i, "tokenizer", v) for i, v in enumerate(hist)]
    _write_log(cfg, "tokenizer", records)


def cmd_pretrain_ar(cfg: RunConfig, args) -> None:
    _, gt, _ = _load_pairs(cfg, "train")
    ar = NextScaleTransformer(cfg.schedule, cfg.ar, Rng(cfg.seed).child("ar_init"))
    ar, hist = trainer.pretrain_ar(ar, _latents(cfg, gt), cfg.train["pretrain_ar"])
    checkpoint.save(_ckpt(cfg, "ar_pretrained"), {"ar": ar}, _meta(cfg, ar=asdict(cfg.ar)))
    _write_log(cfg, "pretrain_ar", hist)


def cmd_train_stage1(cfg: RunConfig, args) -> None:
    _, gt, lr = _load_pairs(cfg, "train")
    tnet = TransformNet(cfg.schedule, cfg.tnet_width, Rng(cfg.seed).child("tnet_init"))
    tnet, hist = trainer.train_stage1(tnet, _latents(cfg, gt), lr, cfg.train["stage1"])
    meta = _meta(cfg, tnet_width=cfg.tnet_width, stage1_done=True)
    checkpoint.save(_ckpt(cfg, "tnet_stage1"), {"tnet": tnet}, meta)
    _write_log(cfg, "stage1", hist)


def cmd_train_stage2(cfg: RunConfig, args) -> None:
    _, gt, lr = _load_pairs(cfg, "train")
    base = cfg.train["stage2"]
    if args.from_scratch:
        tc = trainer.TrainCfg(**{**base.to_dict(), "stage": "stage2_from_scratch"})
        tnet = TransformNet(cfg.schedule, cfg.tnet_width, Rng(cfg.seed).child("tnet_init"))
        name = "nsarm_scratch"
    else:
        tc = base
        if not _ckpt(cfg, "tnet_stage1").exists():
            raise FileNotFoundError("stage-1 checkpoint missing; run train-stage1 or pass --from-scratch")
        tnet = _load_tnet(cfg, "tnet_stage1")
        name = "nsarm"
    ar = _load_ar(cfg, "ar_pretrained")
    latents = _latents(cfg, gt)
    ar, tnet, hist = trainer.train_stage2(ar, tnet, latents, lr, tc)
    meta = _meta(cfg, ar=asdict(ar.cfg), tnet_width=tnet.width, stage1_done=tnet.stage1_done)
    checkpoint.save(_ckpt(cfg, name), {"ar": ar, "tnet": tnet}, meta)
    _write_log(cfg, name, hist)


def _model_name(args) -> str:
    return "nsarm_scratch" if getattr(args, "from_scratch", False) else "nsarm"


def cmd_infer(cfg: RunConfig, args) -> None:
    ae = _load_tokenizer(cfg)
    ar = _load_ar(cfg, _model_name(args))
    tnet = _load_tnet(cfg, _model_name(args))
    if args.input:
        items = [(Path(args.input).stem, Path(args.input))]
    else:
        rows = _read_manifest(cfg, args.split)
        items = [(r["image_id"], cfg.data_dir / r["lr"]) for r in rows]
    out_dir = cfg.output_dir / "sr"
    timings = [["image_id", "seconds"]]
    for iid, path in items:
        t0 = time.perf_counter()
        hr = super_resolve(ar, tnet, ae, read_image(path), cfg.sampling)
        timings.append([iid, f"{time.perf_counter() - t0:.4f}"])
        write_image(out_dir / f"{iid}.ppm", hr)
    # wall-clock timings are not reproducible, so determinism mode skips them
    if not args.deterministic:
        checkpoint.atomic_write(cfg.output_dir / "infer_timings.csv", _csv(timings))


def _k_range(spec: str, K: int) -> list[int]:
    lo, sep, hi = spec.partition("..")
    try:
        if not sep:
            ks = [int(lo)]
        else:
            ks = list(range(int(lo), (K if hi == "K" else int(hi)) + 1))
    except ValueError:
        raise ConfigError(f"--k must look like 3 or 0..K, got {spec!r}") from None
    if not ks or min(ks) < 0 or max(ks) > K:
        raise ConfigError(f"--k range {spec!r} outside 0..{K}")
    return ks


def cmd_pathway(cfg: RunConfig, args) -> None:
    ae = _load_tokenizer(cfg)
    ar = _load_ar(cfg, args.model)
    ks = _k_range(args.k, ar.schedule.K)
    ref = read_image(args.ref)
    ref_latent = ae.encode(ref)
    rows = [["k_replace", "latent_distance"]]
    out_dir = cfg.output_dir / "pathway"
    for k in ks:
        img, rq = pathway_replace_generate(ar, ae, ref, k, cfg.sampling)
        rows.append([k, repr(latent_distance(rq, ref_latent).item())])
        write_image(out_dir / f"{Path(args.ref).stem}_k{k:02d}.ppm", img)
    checkpoint.atomic_write(out_dir / f"{Path(args.ref).stem}_distances.csv", _csv(rows))


def cmd_decompose(cfg: RunConfig, args) -> None:
    ae = _load_tokenizer(cfg)
    img = read_image(args.input)
    with torch.no_grad():
        rq = decompose(ae.encode(img), cfg.schedule)
    stem = Path(args.input).stem
    checkpoint.atomic_write(cfg.output_dir / f"{stem}.nstk", write_token_stream(rq))
    rows = [["k", "h", "w", "ones_fraction", "residual_norm"]]
    for k, r in enumerate(rq.residuals, start=1):
        h, w = cfg.schedule.scale(k)
        rows.append([k, h, w, repr(rq.labels(k).double().mean().item()), repr(r.norm().item())])
    checkpoint.atomic_write(cfg.output_dir / f"{stem}_scales.csv", _csv(rows))


def cmd_eval_images(cfg: RunConfig, args) -> None:
    pred_dir = Path(args.pred_dir) if args.pred_dir else cfg.output_dir / "sr"
    table = evaluation.ScoreTable()
    for r in _read_manifest(cfg, args.split):
        pred_path = pred_dir / f"{r['image_id']}.ppm"
        if not pred_path.exists():
            raise FileNotFoundError(f"prediction {pred_path} missing")
        pred, gt = read_image(pred_path), read_image(cfg.data_dir / r["gt"])
        table.add(r["image_id"], args.dataset, "psnr", evaluation.psnr(pred, gt))
        table.add(r["image_id"], args.dataset, "ssim", evaluation.ssim(pred, gt))
    checkpoint.atomic_write(cfg.output_dir / "image_scores.csv", table.to_csv())


def _read_scores(path: str) -> evaluation.ScoreTable:
    return evaluation.ScoreTable.from_csv(Path(path).read_text(encoding="utf-8"))


def _metric_list(spec: str | None, table: evaluation.ScoreTable) -> list[str]:
    return spec.split(",") if spec else table.metrics()


def cmd_eval_scores(cfg: RunConfig, args) -> None:
    table = _read_scores(args.scores)
    rows = [["dataset", "metric", "mean", "variance"]]
    for ds in table.datasets():
        for m in table.metrics(ds):
            mean, var = evaluation.variance_report(table, ds, m)
            rows.append([ds, m, repr(mean), repr(var)])
    checkpoint.atomic_write(cfg.output_dir / "variance_report.csv", _csv(rows))
    metrics = _metric_list(args.metrics, table)
    curves = {}
    for ds in table.datasets():
        curve = evaluation.sorted_curve(table, ds, metrics)
        curves[ds] = curve
        checkpoint.atomic_write(cfg.output_dir / f"curve_{ds}.csv", evaluation.curve_csv(curve))
    if args.svg:
        checkpoint.atomic_write(cfg.output_dir / "curves.svg", evaluation.curve_svg(curves))


def cmd_report_robustness(cfg: RunConfig, args) -> None:
    table = _read_scores(args.scores)
    report = evaluation.failure_report(table, _metric_list(args.metrics, table))
    checkpoint.atomic_write(cfg.output_dir / "failure_report.csv", report)


HANDLERS = {
    "make-data": cmd_make_data,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain-ar": cmd_pretrain_ar,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "infer": cmd_infer,
    "pathway": cmd_pathway,
    "decompose": cmd_decompose,
    "eval-images": cmd_eval_images,
    "eval-scores": cmd_eval_scores,
    "report-robustness": cmd_report_robustness,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="run seed; forces deterministic single-worker execution")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--dry-run", action="store_true", help="validate the config and print it; write nothing")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nsarm", description="Next-scale autoregressive super-resolution at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-stage2", "infer"):
            p.add_argument("--from-scratch", action="store_true", help="use the stage-2 run without stage-1 init")
        if name == "infer":
            p.add_argument("--input", help="single LR image; default is every manifest image of --split")
            p.add_argument("--split", default="test")
        if name == "pathway":
            p.add_argument("--ref", required=True)
            p.add_argument("--k", default="0..K", help="k_replace value or range such as 0..K")
            p.add_argument("--model", default="ar_pretrained", choices=["ar_pretrained", "nsarm", "nsarm_scratch"])
        if name == "decompose":
            p.add_argument("--input", required=True)
        if name == "eval-images":
            p.add_argument("--pred-dir")
            p.add_argument("--split", default="test")
            p.add_argument("--dataset", default="toy")
        if name in ("eval-scores", "report-robustness"):
            p.add_argument("--scores", required=True)
            p.add_argument("--metrics", help="comma-separated metric set (default: all)")
        if name == "eval-scores":
            p.add_argument("--svg", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as e:
        print(f"nsarm: config error: {e}", file=sys.stderr)
        return 2
    args.deterministic = args.seed is not None
    workers = 1 if args.deterministic else args.workers
    if args.dry_run:
        print(json.dumps({"command": args.command, "workers": workers, **cfg.describe()}, indent=2, sort_keys=True))
        return 0
    prev_threads, prev_det = torch.get_num_threads(), torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(workers)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        HANDLERS[args.command](cfg, args)
    except ConfigError as e:
        print(f"nsarm: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure with exit code 1
        log.debug("traceback", exc_info=True)
        print(f"nsarm {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)
    return 0


if __name__ == "__main__":
    sys.exit(main())
