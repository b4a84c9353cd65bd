"""Command-line entry point: ``lear <command> [options]``.

Exit codes: 0 success, 1 training divergence, 2 configuration error,
3 data error, 4 missing prerequisite checkpoint, 5 unmatched map ids.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import backbone as bb
from .cmg import build_discriminator, build_generator, generate_map
from .core import PLANAR2D, VOLUMETRIC3D, ConfigError, HyperParams, ShapeError, parse_target
from .guidance import accuracy, directional_ncc, match_pairs, mauc, shuffled_pairs
from .io import DataError, checkpoint_exists, fingerprint, ingest_mnist, load_checkpoint, load_raw, save_raw
from .phantom import PhantomSpec, PhantomSpecError, generate_phantom, longitudinal, save_dataset
from .phantom import load_dataset as load_phantom
from .render import render_grid
from .trainer import (DivergenceError, RunDirectory, _save, iterate_lear, pyramid_encoder, train_cmg_phase,
                      train_xga_phase)
from .xga import inject

logger = logging.getLogger("lear")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_UNMATCHED = 0, 1, 2, 3, 4, 5
MANIFEST = "run_manifest.json"


class MissingPrerequisite(RuntimeError):
    pass


class UnmatchedIds(ValueError):
    pass


class ManifestExists(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------

RUN_KEYS = {"profile", "hyperparams", "width", "disc_width", "train_subset"}


@dataclass
class RunConfig:
    """Contents of ``--config``: a profile name, hyperparameter overrides and model sizing."""

    profile: Optional[str] = None
    hyperparams: dict = field(default_factory=dict)
    width: float = 1.0
    disc_width: float = 1.0
    train_subset: int = 0

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        unknown = sorted(set(d) - RUN_KEYS)
        if unknown:
            raise ConfigError(f"{p}: unknown config keys {unknown}")
        cfg = cls(**d)
        if cfg.width <= 0 or cfg.disc_width <= 0 or cfg.train_subset < 0:
            raise ConfigError("width and disc_width must be > 0, train_subset >= 0")
        return cfg

    def params(self, domain: str, seed: Optional[int]) -> HyperParams:
        overrides = dict(self.hyperparams)
        if seed is not None:
            overrides["seed"] = seed
        return HyperParams.from_dict(overrides, profile=self.profile or domain)


# -- manifests -----------------------------------------------------------------


def _manifest_path(out: Path) -> Path:
    return out / MANIFEST


def read_manifest(out: Path) -> dict:
    p = _manifest_path(out)
    return json.loads(p.read_text()) if p.exists() else {}


def record_stage(out: Path, command: str, args, params: Optional[HyperParams], data_fp: Optional[str],
                 artifacts: dict, started: float, force: bool):
    """Add one command's entry to the directory's single run manifest."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(out)
    stages = manifest.setdefault("stages", {})
    if command in stages and not force:
        raise ManifestExists(f"{_manifest_path(out)} already records {command!r}; pass --force to overwrite")
    stages[command] = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "hyperparams": params.to_dict() if params else None,
        "dataset_fingerprint": data_fp,
        "artifacts": artifacts,
        "started": started,
        "finished": time.time(),
        "seed": params.seed if params else getattr(args, "seed", None),
    }
    _manifest_path(out).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _guard(out: Path, command: str, force: bool):
    if command in read_manifest(out).get("stages", {}) and not force:
        raise ManifestExists(f"{_manifest_path(out)} already records {command!r}; pass --force to overwrite")


# -- data ----------------------------------------------------------------------


def load_data(path, split: str = "train"):
    """(X, y, ids) from an MNIST IDX directory or a phantom directory (optionally with split subdirs)."""
    if path is None:
        raise DataError("no --data path given")
    p = Path(path)
    if not p.exists():
        raise DataError(f"data path does not exist: {p}")
    if (p / split / "index.json").exists():
        p = p / split
    if (p / "index.json").exists() or (p.is_dir() and any(p.glob("*.raw"))):
        return load_phantom(p)
    try:
        X, y = ingest_mnist(p, split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    return X, y, [f"{split}{i:05d}" for i in range(len(X))]


def _domain(X) -> str:
    return PLANAR2D if X.ndim == 4 else VOLUMETRIC3D


def _spec_for(X, y, cfg: RunConfig):
    k = int(y.max()) + 1
    if _domain(X) == PLANAR2D:
        return bb.planar_spec(k, X.shape[1:])
    return bb.volumetric_spec(k, X.shape[1:], cfg.width)


def _subset(X, y, n):
    return (X[:n], y[:n]) if n else (X, y)


# -- model restoration ---------------------------------------------------------


def _require(run: RunDirectory, name: str):
    if not checkpoint_exists(run.checkpoint(name)):
        raise MissingPrerequisite(f"missing prerequisite checkpoint {run.checkpoint(name)}")


def _load_backbone(run: RunDirectory):
    _require(run, "backbone")
    state, manifest = load_checkpoint(run.checkpoint("backbone"))
    spec = bb.BackboneSpec(**{**manifest["spec"], "layers": [
        bb.ConvSpec(**l) if "out_channels" in l else bb.PoolSpec(**l) for l in manifest["spec"]["layers"]]})
    model = bb.DiagnosticModel(spec)
    model.load_state_dict(state)
    return model.freeze(), manifest


def _latest(run: RunDirectory, stem: str) -> int:
    k = 0
    while checkpoint_exists(run.checkpoint(f"{stem}_{k + 1}")):
        k += 1
    return k


def _restore_stack(run: RunDirectory, cfg: RunConfig, params: HyperParams, upto_cmg: int, upto_xga: int):
    backbone, _ = _load_backbone(run)
    gen, disc = build_generator(backbone, params.generator_norm), build_discriminator(backbone, width=cfg.disc_width)
    xga_model = inject(backbone, params.r, seed=params.seed)
    if upto_cmg:
        gen.load_state_dict(load_checkpoint(run.checkpoint(f"cmg_{upto_cmg}"))[0])
        if checkpoint_exists(run.checkpoint(f"disc_{upto_cmg}")):
            disc.load_state_dict(load_checkpoint(run.checkpoint(f"disc_{upto_cmg}"))[0])
    if upto_xga:
        xga_model.attention.load_state_dict(load_checkpoint(run.checkpoint(f"xga_{upto_xga}"))[0])
    return backbone, gen, disc, xga_model


# -- commands ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    out = Path(args.out)
    _guard(out, "ingest", args.force)
    started = time.time()
    report = {}
    fps = []
    for split in ("train", "test"):
        try:
            X, y = ingest_mnist(args.data, split)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from None
        report[split] = {"count": int(len(X)), "shape": list(X.shape[1:]),
                         "histogram": np.bincount(y, minlength=10).tolist(),
                         "min": float(X.min()), "max": float(X.max())}
        fps.append(fingerprint(X, y))
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset_report.json").write_text(json.dumps(report, indent=2))
    record_stage(out, "ingest", args, None, "-".join(fps), {"report": str(out / "dataset_report.json")},
                 started, args.force)
    print(json.dumps(report))
    return EXIT_OK


def cmd_make_phantom(args) -> int:
    out = Path(args.out)
    _guard(out, "make-phantom", args.force)
    started = time.time()
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read phantom config {args.config}: {exc}") from None
    n_long = int(d.pop("longitudinal_subjects", 20))
    test_per_class = int(d.pop("test_samples_per_class", 30))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = PhantomSpec(**d)
    except (TypeError, PhantomSpecError) as exc:
        raise ConfigError(str(exc)) from None
    train = generate_phantom(spec)
    test = generate_phantom(PhantomSpec(**{**spec.to_dict(), "samples_per_class": test_per_class,
                                           "seed": spec.seed + 1}))
    save_dataset(out / "train", train)
    save_dataset(out / "test", test)
    long = longitudinal(spec, n_long, spec.seed + 2)
    write_longitudinal(out / "longitudinal", long)
    record_stage(out, "make-phantom", args, None, fingerprint(train.X, train.y),
                 {"train": str(out / "train"), "test": str(out / "test"),
                  "longitudinal": str(out / "longitudinal")}, started, args.force)
    return EXIT_OK


def write_longitudinal(directory: Path, long) -> None:
    """Per subject: one volume per class plus exact GT maps between the extreme classes."""
    directory.mkdir(parents=True, exist_ok=True)
    k = long.spec.num_classes
    gt_dir = directory / "gt"
    for i, s in enumerate(long.subjects):
        for c in range(k):
            save_raw(directory / f"{s.subject_id}_c{c}.raw", long.X[i, c], **{
                "class": c, "sample_id": f"{s.subject_id}_c{c}", "subject": s.subject_id, "seed": long.spec.seed})
        for sick, healthy, scenario in _scenarios(k):
            plus = long.ground_truth(i, healthy, sick)  # healthier minus sicker: explains sick -> healthy
            save_raw(gt_dir / f"{s.subject_id}_{scenario}_plus.raw", plus, subject=s.subject_id,
                     scenario=scenario, direction="plus")
            save_raw(gt_dir / f"{s.subject_id}_{scenario}_minus.raw", -plus, subject=s.subject_id,
                     scenario=scenario, direction="minus")


def _scenarios(k: int):
    """(sicker, healthier, name) pairs scored by NCC; class 0 is healthiest."""
    return [(b, a, f"{a}-{b}") for a in range(k) for b in range(a + 1, k)]


def cmd_train_backbone(args) -> int:
    run = RunDirectory(args.out)
    _guard(run.root, "train-backbone", args.force)
    started = time.time()
    cfg = RunConfig.load(args.config)
    X, y, _ = load_data(args.data, "train")
    X, y = _subset(X, y, cfg.train_subset)
    params = cfg.params(_domain(X), args.seed)
    spec = _spec_for(X, y, cfg)
    run.create()
    params.to_json(run.config)
    try:
        model, hist = bb.train_backbone(X, y, spec, params, log_every=50)
    except FloatingPointError as exc:
        raise DivergenceError(str(exc)) from None
    metrics = {"val_acc": hist.val_acc[-1] if hist.val_acc else None, "steps": hist.steps}
    try:
        Xt, yt, _ = load_data(args.data, "test")
        _, metrics["test_acc"] = bb.evaluate(model, Xt, yt)
    except DataError:
        pass
    spec_d = asdict(spec)
    spec_d["layers"] = [asdict(l) for l in spec.layers]
    _save(run, "backbone", model, model, params, metrics, {"spec": spec_d})
    (run.reports / "backbone_metrics.json").write_text(json.dumps({**metrics, **hist.to_dict()}, indent=2))
    record_stage(run.root, "train-backbone", args, params, fingerprint(X, y),
                 {"checkpoint": str(run.checkpoint("backbone"))}, started, args.force)
    print(json.dumps(metrics))
    return EXIT_OK


def _stage_params(args, run: RunDirectory, cfg: RunConfig, domain: str) -> HyperParams:
    if args.config:
        return cfg.params(domain, args.seed)
    if run.config.exists():
        p = HyperParams.from_json(run.config)
        return p.replace(seed=args.seed) if args.seed is not None else p
    return cfg.params(domain, args.seed)


def cmd_train_cmg(args) -> int:
    run = RunDirectory(args.out)
    cfg = RunConfig.load(args.config)
    _require(run, "backbone")
    k = _latest(run, "cmg") + 1
    command = f"train-cmg-{k}"
    _guard(run.root, command, args.force)
    started = time.time()
    X, y, _ = load_data(args.data, "train")
    X, y = _subset(X, y, cfg.train_subset)
    params = _stage_params(args, run, cfg, _domain(X))
    backbone, gen, disc, xga_model = _restore_stack(run, cfg, params, k - 1, min(k - 1, _latest(run, "xga")))
    encoder = pyramid_encoder(k, backbone, xga_model)
    res = train_cmg_phase(encoder, gen, disc, X, params, log_path=run.log("cmg", k), salt=10 * k + 1)
    _save(run, f"cmg_{k}", gen, backbone, params, {"steps": res.steps})
    _save(run, f"disc_{k}", disc, backbone, params)
    record_stage(run.root, command, args, params, fingerprint(X),
                 {"checkpoint": str(run.checkpoint(f"cmg_{k}")), "log": str(run.log("cmg", k))}, started, args.force)
    return EXIT_OK


def cmd_train_xga(args) -> int:
    run = RunDirectory(args.out)
    cfg = RunConfig.load(args.config)
    k = _latest(run, "cmg")
    if k == 0:
        raise MissingPrerequisite(f"missing prerequisite checkpoint {run.checkpoint('cmg_1')}; run train-cmg first")
    command = f"train-xga-{k}"
    _guard(run.root, command, args.force)
    started = time.time()
    X, y, _ = load_data(args.data, "train")
    X, y = _subset(X, y, cfg.train_subset)
    params = _stage_params(args, run, cfg, _domain(X))
    backbone, gen, _, xga_model = _restore_stack(run, cfg, params, k, min(k - 1, _latest(run, "xga")))
    res = train_xga_phase(xga_model, gen, X, y, params, pyramid_encoder=pyramid_encoder(k, backbone, xga_model),
                          log_path=run.log("xga", k), salt=10 * k + 2)
    _save(run, f"xga_{k}", xga_model.attention, backbone, params, {"steps": res.steps}, {"r": params.r})
    record_stage(run.root, command, args, params, fingerprint(X, y),
                 {"checkpoint": str(run.checkpoint(f"xga_{k}")), "log": str(run.log("xga", k))}, started, args.force)
    return EXIT_OK


def cmd_iterate(args) -> int:
    run = RunDirectory(args.out)
    cfg = RunConfig.load(args.config)
    _require(run, "backbone")
    _guard(run.root, "iterate", args.force)
    started = time.time()
    X, y, _ = load_data(args.data, "train")
    X, y = _subset(X, y, cfg.train_subset)
    params = _stage_params(args, run, cfg, _domain(X))
    backbone, _ = _load_backbone(run)
    res = iterate_lear(backbone, X, y, params, args.iters, run=run, disc_width=cfg.disc_width)
    summary = [{"k": s.k, "encoder_mode": s.encoder_mode, **s.metrics} for s in res.history]
    (run.reports / "iterations.json").write_text(json.dumps(summary, indent=2))
    record_stage(run.root, "iterate", args, params, fingerprint(X, y),
                 {f"iteration_{s.k}": s.checkpoints for s in res.history}, started, args.force)
    print(json.dumps(summary))
    return EXIT_OK


def _read_inputs(args):
    """Explain inputs: a single ``.raw`` file or ``--data`` with ``--index``."""
    if args.input:
        x, meta = load_raw(args.input)
        return x, meta.get("sample_id", Path(args.input).stem)
    X, _, ids = load_data(args.data, args.split)
    if not 0 <= args.index < len(X):
        raise DataError(f"--index {args.index} outside the {len(X)} available samples")
    return X[args.index], ids[args.index]


def cmd_explain(args) -> int:
    run = RunDirectory(args.out)
    started = time.time()
    backbone, manifest = _load_backbone(run)
    k_cmg = _latest(run, "cmg")
    if k_cmg == 0:
        raise MissingPrerequisite(f"missing prerequisite checkpoint {run.checkpoint('cmg_1')}")
    try:
        target = parse_target(args.target, backbone.spec.num_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig.load(args.config)
    params = _stage_params(args, run, cfg, backbone.spec.domain)
    k_xga = min(k_cmg - 1, _latest(run, "xga"))
    backbone, gen, _, xga_model = _restore_stack(run, cfg, params, k_cmg, k_xga)
    encoder = pyramid_encoder(k_cmg, backbone, xga_model)
    x, sample_id = _read_inputs(args)
    m = generate_map(encoder, gen, x, target)[0]
    x_tilde = x + m
    post_x = bb.predict_proba(backbone, x[None])[0]
    post_t = bb.predict_proba(backbone, x_tilde[None])[0]
    tag = f"{sample_id}_t{args.target.replace(',', '_').replace(':', '-')}"
    outdir = run.reports / "explain"
    save_raw(outdir / f"{tag}_map.raw", m, sample_id=sample_id, target=target.probs.tolist())
    png = render_grid(x, m, x_tilde, outdir / f"{tag}.png", posterior_x=post_x, posterior_tilde=post_t,
                      target=target.probs)
    print(json.dumps({"sample_id": sample_id, "target": target.probs.tolist(),
                      "posterior_input": post_x.tolist(), "posterior_transformed": post_t.tolist(),
                      "png": str(png)}))
    record_stage(run.root, f"explain-{tag}", args, None, None, {"png": str(png)}, started, True)
    return EXIT_OK


def _read_maps(directory) -> dict:
    d = Path(directory)
    if not d.exists():
        raise DataError(f"map directory does not exist: {d}")
    maps = {}
    for f in sorted(d.glob("*.raw")):
        a, meta = load_raw(f)
        try:
            key = (meta["subject"], meta["scenario"], meta["direction"])
        except KeyError:
            raise DataError(f"{f}: sidecar lacks subject/scenario/direction") from None
        maps[key] = a
    return maps


def predict_longitudinal_maps(run: RunDirectory, cfg: RunConfig, params: HyperParams, long_dir: Path, out_dir: Path):
    """Counterfactual maps for every longitudinal subject and scenario, keyed like the GT maps."""
    backbone, _ = _load_backbone(run)
    k_cmg = _latest(run, "cmg")
    if k_cmg == 0:
        raise MissingPrerequisite(f"missing prerequisite checkpoint {run.checkpoint('cmg_1')}")
    backbone, gen, _, xga_model = _restore_stack(run, cfg, params, k_cmg, min(k_cmg - 1, _latest(run, "xga")))
    encoder = pyramid_encoder(k_cmg, backbone, xga_model)
    k = backbone.spec.num_classes
    eye = np.eye(k)
    vols = {}
    for f in sorted(Path(long_dir).glob("*_c*.raw")):
        a, meta = load_raw(f)
        vols[(meta["subject"], int(meta["class"]))] = a
    subjects = sorted({s for s, _ in vols})
    for s in subjects:
        for sick, healthy, scenario in _scenarios(k):
            plus = generate_map(encoder, gen, vols[(s, sick)], eye[healthy])[0]
            minus = generate_map(encoder, gen, vols[(s, healthy)], eye[sick])[0]
            save_raw(out_dir / f"{s}_{scenario}_plus.raw", plus, subject=s, scenario=scenario, direction="plus")
            save_raw(out_dir / f"{s}_{scenario}_minus.raw", minus, subject=s, scenario=scenario, direction="minus")
    return out_dir


def cmd_evaluate(args) -> int:
    run = RunDirectory(args.out)
    started = time.time()
    run.reports.mkdir(parents=True, exist_ok=True)
    result = {}
    cfg = RunConfig.load(args.config)
    if args.gt:
        pred_dir = args.pred
        if pred_dir is None:
            long_dir = Path(args.gt).parent
            params = _stage_params(args, run, cfg, VOLUMETRIC3D)
            pred_dir = predict_longitudinal_maps(run, cfg, params, long_dir, run.reports / "pred_maps")
        pred, gt = _read_maps(pred_dir), _read_maps(args.gt)
        try:
            pairs = match_pairs(pred, gt)
        except ValueError as exc:
            raise UnmatchedIds(str(exc)) from None
        report = directional_ncc(pairs)
        report.to_csv(run.reports / "ncc.csv")
        report.to_json(run.reports / "ncc.json")
        result["ncc_plus"], result["ncc_minus"] = report.mean("plus"), report.mean("minus")
        if args.shuffle:
            base = directional_ncc(shuffled_pairs(pairs, np.random.default_rng(args.seed or 0)))
            base.to_csv(run.reports / "ncc_shuffled.csv")
            base.to_json(run.reports / "ncc_shuffled.json")
            result["shuffled_plus"], result["shuffled_minus"] = base.mean("plus"), base.mean("minus")
    if args.data:
        model, _ = _load_backbone(run)
        k_xga = _latest(run, "xga")
        if k_xga:
            params = _stage_params(args, run, cfg, model.spec.domain)
            _, _, _, xga_model = _restore_stack(run, cfg, params, 0, k_xga)
            model = xga_model
        X, y, _ = load_data(args.data, "test")
        probs = bb.predict_proba(model, X)
        result["accuracy"] = accuracy(y, probs)
        result["mauc"] = mauc(y, probs)
    if not result:
        raise ConfigError("evaluate needs --gt (NCC) and/or --data (accuracy/mAUC)")
    (run.reports / "evaluation.json").write_text(json.dumps(result, indent=2))
    record_stage(run.root, "evaluate", args, None, None, {"report": str(run.reports / "evaluation.json")},
                 started, True)
    print(json.dumps(result))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lear", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run config")
        if data:
            p.add_argument("--data", help="MNIST IDX directory or phantom directory")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite an existing manifest entry")
        return p

    common(sub.add_parser("ingest", help="parse and summarize MNIST IDX files")).set_defaults(func=cmd_ingest)
    common(sub.add_parser("make-phantom", help="write a synthetic volumetric dataset"),
           data=False).set_defaults(func=cmd_make_phantom)
    common(sub.add_parser("train-backbone")).set_defaults(func=cmd_train_backbone)
    common(sub.add_parser("train-cmg")).set_defaults(func=cmd_train_cmg)
    common(sub.add_parser("train-xga")).set_defaults(func=cmd_train_xga)
    p = common(sub.add_parser("iterate"))
    p.add_argument("--iters", type=int, default=1)
    p.set_defaults(func=cmd_iterate)
    p = common(sub.add_parser("explain", help="counterfactual map for one sample"))
    p.add_argument("--target", required=True, help="class index, probability vector 'p0,p1,..', or 'a:b:alpha'")
    p.add_argument("--input", help="single .raw volume/image with JSON sidecar")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_explain)
    p = common(sub.add_parser("evaluate", help="NCC against GT maps and/or accuracy and mAUC"))
    p.add_argument("--gt", help="directory of ground-truth maps")
    p.add_argument("--pred", help="directory of predicted maps (default: generate from the run)")
    p.add_argument("--shuffle", action="store_true", help="also report the shuffled-pair baseline")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ManifestExists) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UnmatchedIds as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNMATCHED


if __name__ == "__main__":
    sys.exit(main())
