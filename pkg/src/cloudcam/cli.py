"""Command-line driver: gen, train, retrieve, ipa, eval, plot.

Every command writes a JSON run manifest next to its outputs. Exit codes:
0 success, 1 usage error, 2 data/contract error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from .errors import CloudCamError, ConfigError, NumericalError
from .ipa import ipa_invert
from .losses import evaluate_fields, improvement_pct_rounded
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, history_csv, patches_from_profiles, retrieve_profile, train

log = logging.getLogger("cloudcam")

EVAL_COLUMNS = ("method", "cot_mae", "cot_mse", "cot_corr", "cer_mae", "cer_mse", "cer_corr",
                "cot_impv_over_baseline_pct", "cer_impv_over_baseline_pct")


class UsageError(Exception):
    pass


# -- manifests -----------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    checksums: dict = field(default_factory=dict)

    def finish(self, path, started):
        self.wall_clock_s = round(time.perf_counter() - started, 3)
        self.checksums = {str(p): sha256(p) for p in self.outputs}
        self.outputs = [str(p) for p in self.outputs]
        self.inputs = [str(p) for p in self.inputs]
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path_for(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _profile_seed(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def _cpf_inputs(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.cpf"))
        if not files:
            raise ConfigError(f"no .cpf files in {path}")
        return files
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    return [path]


def _output_for(inp, out, multi):
    out = Path(out)
    if multi:
        out.mkdir(parents=True, exist_ok=True)
        return out / Path(inp).name
    if out.suffix != ".cpf" and (out.is_dir() or not out.suffix):
        out.mkdir(parents=True, exist_ok=True)
        return out / Path(inp).name
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _load_radiance(path):
    planes = D.read_profile(path)
    if "r066" not in planes or "r213" not in planes:
        raise ConfigError(f"{path} has no radiance planes (has {sorted(planes)})")
    return np.stack([planes["r066"], planes["r213"]])


# -- commands ------------------------------------------------------------

def cmd_gen(args):
    started = time.perf_counter()
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    gen = D.GenParams()
    fwd = D.ForwardModelParams(effect3d_eta=args.eta, effect3d_shift=args.shift).validate()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [_profile_seed(args.seed, i) for i in range(args.count)]
    files = []
    for i, s in enumerate(seeds):
        prof = D.synth_profile(s, args.size, args.size, gen, fwd)
        path = out / f"profile_{i:05d}.cpf"
        D.write_profile(path, prof)
        files.append(path)
    RunManifest("gen", {"size": args.size, "count": args.count, "generator": asdict(gen), "forward": asdict(fwd)},
                seeds=[args.seed] + seeds, outputs=files).finish(out / "manifest.json", started)
    return 0


def _dataclass_from(cls, d, what):
    known = {f.name for f in fields(cls)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown {what} config keys: {sorted(bad)}")
    return cls(**d)


def load_run_config(path):
    cfg = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg = json.loads(p.read_text(encoding="utf-8"))
    bad = set(cfg) - {"model", "train", "split", "split_seed"}
    if bad:
        raise ConfigError(f"unknown top-level config keys: {sorted(bad)}")
    model = _dataclass_from(ModelConfig, cfg.get("model", {}), "model").validate()
    tcfg = _dataclass_from(TrainConfig, cfg.get("train", {}), "train").validate()
    split = tuple(cfg.get("split", (0.6, 0.2, 0.2)))
    return model, tcfg, split, int(cfg.get("split_seed", 0))


def cmd_train(args):
    started = time.perf_counter()
    if args.resume:
        raise UsageError("resuming training is not supported")
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"data dir {data_dir} does not exist")
    mcfg, tcfg, split, split_seed = load_run_config(args.config)
    files = _cpf_inputs(data_dir)
    tr_files, va_files, te_files = D.split_dataset(files, split, split_seed)

    def load(fs):
        profs = [D.planes_to_profile(D.read_profile(f)) for f in fs]
        if any(p.radiance is None or p.cot is None or p.cer is None for p in profs):
            raise ConfigError("training profiles need all four planes")
        return profs

    tr = patches_from_profiles(load(tr_files), mcfg.window, tcfg.stride)
    va = patches_from_profiles(load(va_files), mcfg.window, tcfg.stride)
    model = build_model(mcfg, seed=tcfg.seed)
    best, history = train(model, tr, va, tcfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    hist = out.with_name(out.name + ".history.csv")
    hist.write_text(history_csv(history))
    RunManifest("train", {"model": asdict(mcfg), "train": asdict(tcfg), "split": list(split),
                          "split_seed": split_seed, "best_epoch": best.epoch,
                          "splits": {"train": [str(f) for f in tr_files], "val": [str(f) for f in va_files],
                                     "test": [str(f) for f in te_files]}},
                seeds=[tcfg.seed, split_seed], inputs=files, outputs=[out, hist]).finish(manifest_path_for(out),
                                                                                      started)
    return 0


def cmd_retrieve(args):
    started = time.perf_counter()
    model = load_checkpoint(args.model)
    stride = args.stride or max(1, model.config.window * 5 // 8)
    inputs = _cpf_inputs(args.input)
    multi = Path(args.input).is_dir()
    outs = []
    for f in inputs:
        rad = _load_radiance(f)
        log_cot, cer = retrieve_profile(model, rad, stride=stride)
        dst = _output_for(f, args.out, multi)
        D.write_profile(dst, {"cot": D.predicted_cot(log_cot), "cer": np.maximum(cer, 0.0)})
        outs.append(dst)
    _finish_per_output("retrieve", {"model": str(args.model), "stride": stride, "config": asdict(model.config)},
                       inputs, outs, args.out, multi, started)
    return 0


def cmd_ipa(args):
    started = time.perf_counter()
    p = D.ForwardModelParams(gamma=args.gamma, beta=args.beta, albedo=args.albedo).validate()
    inputs = _cpf_inputs(args.input)
    multi = Path(args.input).is_dir()
    outs = []
    for f in inputs:
        rad = _load_radiance(f)
        tau, re, _ = ipa_invert(rad[0], rad[1], p)
        dst = _output_for(f, args.out, multi)
        D.write_profile(dst, {"cot": tau, "cer": re})
        outs.append(dst)
    _finish_per_output("ipa", {"forward": asdict(p)}, inputs, outs, args.out, multi, started)
    return 0


def _finish_per_output(command, config, inputs, outs, out_arg, multi, started):
    target = Path(out_arg) / "manifest.json" if multi or Path(out_arg).is_dir() else manifest_path_for(outs[0])
    RunManifest(command, config, inputs=inputs, outputs=outs).finish(target, started)


def _named_path(spec):
    if "=" in spec:
        name, path = spec.split("=", 1)
    else:
        path = spec
        name = Path(spec).stem
    return name, Path(path)


def _pairs(pred_path, truth_files, truth_is_dir):
    pairs = []
    for tf in truth_files:
        pf = pred_path / tf.name if truth_is_dir else pred_path
        if not pf.exists():
            raise ConfigError(f"missing prediction {pf} for truth {tf}")
        truth = D.read_profile(tf)
        pred = D.read_profile(pf)
        for key in ("cot", "cer"):
            if key not in truth or key not in pred:
                raise ConfigError(f"plane {key!r} missing in {tf if key not in truth else pf}")
            if truth[key].shape != pred[key].shape:
                raise ConfigError(f"{pf}: plane {key} shape {pred[key].shape} != truth {truth[key].shape}")
        pairs.append((D.transform_cot(truth["cot"]), D.transform_cot(np.maximum(pred["cot"], 0.0)),
                      truth["cer"], pred["cer"]))
    return pairs


def eval_table(named_preds, truth, baseline=None, mask_cloudy=False):
    """Rows of the comparison table; the baseline (if any) comes first."""
    truth = Path(truth)
    truth_files = _cpf_inputs(truth)
    reports = []
    entries = ([baseline] if baseline else []) + list(named_preds)
    for name, path in entries:
        reports.append((name, evaluate_fields(_pairs(path, truth_files, truth.is_dir()), mask_cloudy)))
    base = reports[0][1] if baseline else None
    rows = []
    for name, rep in reports:
        row = {"method": name, "cot_mae": rep.cot.mae, "cot_mse": rep.cot.mse, "cot_corr": rep.cot.pearson,
               "cer_mae": rep.cer.mae, "cer_mse": rep.cer.mse, "cer_corr": rep.cer.pearson,
               "cot_impv_over_baseline_pct": "", "cer_impv_over_baseline_pct": ""}
        if base is not None and rep is not base:
            row["cot_impv_over_baseline_pct"] = improvement_pct_rounded(base.cot.mae, rep.cot.mae)
            row["cer_impv_over_baseline_pct"] = improvement_pct_rounded(base.cer.mae, rep.cer.mae)
        rows.append(row)
    return rows


def eval_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_eval(args):
    started = time.perf_counter()
    preds = [_named_path(p) for p in args.pred]
    baseline = _named_path(args.baseline) if args.baseline else None
    rows = eval_table(preds, args.truth, baseline, args.mask_cloudy)
    out = Path(args.csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(eval_csv(rows))
    inputs = [args.truth] + [str(p) for _, p in preds] + ([str(baseline[1])] if baseline else [])
    RunManifest("eval", {"pred": args.pred, "baseline": args.baseline, "mask_cloudy": args.mask_cloudy},
                inputs=inputs, outputs=[out]).finish(manifest_path_for(out), started)
    return 0


def pgm_bytes(plane):
    """8-bit binary PGM, min-max normalized; a constant plane maps to mid-gray 128."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        img = np.rint(255.0 * (plane - lo) / (hi - lo)).astype(np.uint8)
    else:
        img = np.full(plane.shape, 128, dtype=np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def cmd_plot(args):
    started = time.perf_counter()
    planes = D.read_profile(args.field)
    if args.plane not in planes:
        raise ConfigError(f"plane {args.plane!r} not in {args.field}; available: {', '.join(planes)}")
    img = planes[args.plane]
    if args.plane == "cot":
        img = D.transform_cot(np.maximum(img, 0.0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(pgm_bytes(img))
    RunManifest("plot", {"plane": args.plane}, inputs=[args.field], outputs=[out]).finish(manifest_path_for(out),
                                                                                      started)
    return 0


# -- parser ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    ap = _Parser(prog="cloudcam", description="Joint COT/CER retrieval on synthetic two-band radiance.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate synthetic CPF profiles")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--size", type=int, default=144)
    g.add_argument("--eta", type=float, default=0.3)
    g.add_argument("--shift", type=int, default=2)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a CAM model on a directory of profiles")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("retrieve", help="window-based model retrieval")
    r.add_argument("--model", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--stride", type=int, help="tile stride (default: 5/8 of the model window, 40 for 64)")
    r.set_defaults(fn=cmd_retrieve)

    i = sub.add_parser("ipa", help="per-pixel bi-spectral retrieval")
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--gamma", type=float, default=7.0)
    i.add_argument("--beta", type=float, default=0.06)
    i.add_argument("--albedo", type=float, default=0.05)
    i.set_defaults(fn=cmd_ipa)

    e = sub.add_parser("eval", help="score predictions against truth")
    e.add_argument("--pred", action="append", required=True, metavar="NAME=PATH")
    e.add_argument("--truth", required=True)
    e.add_argument("--baseline", metavar="NAME=PATH")
    e.add_argument("--csv", required=True)
    e.add_argument("--mask-cloudy", action="store_true")
    e.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="write one plane as an 8-bit PGM")
    p.add_argument("--field", required=True)
    p.add_argument("--plane", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cloudcam: usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"cloudcam: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"cloudcam: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (CloudCamError, OSError, json.JSONDecodeError) as exc:
        print(f"cloudcam: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
