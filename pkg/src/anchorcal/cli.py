"""``anchorcal`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 data format error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace

import yaml

from . import io as aio
from .anchors import AnchorConfig, dump_anchors
from .camera import BehindCamera, NoConvergence
from .evaluate import (
    DEFAULT_THRESHOLDS,
    EmptyInput,
    calibration_poses,
    evaluate_reprojection,
    vl_benchmark,
)
from .extrinsics import InsufficientFrames
from .graph import ABLATIONS, PriorBudget, SingularSystem, StageConfig, StageError
from .pipeline import RefineConfig, refine
from .synth import ConfigInvalid, SimConfig, simulate

log = logging.getLogger("anchorcal")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DATA = 0, 2, 3, 4

RUN_JSON = "run.json"
REPORT_JSON = "report.json"
EVALUATION_JSON = "evaluation.json"
VL_JSON = "bench_vl.json"
OUT_INTRINSICS = "intrinsics.json"
OUT_EXTRINSICS = "extrinsics.json"
OUT_POSES = "poses.jsonl"

_NUM = {"type": "number"}
_STATS = {
    "type": "object",
    "required": ["median", "mad", "count", "behind"],
    "properties": {
        "median": _NUM, "mad": _NUM,
        "count": {"type": "integer", "minimum": 1},
        "behind": {"type": "integer", "minimum": 0},
    },
}
_VL = {
    "type": "object",
    "required": ["frames", "skipped", "rot_median_deg", "rot_mad_deg", "trans_median_m",
                 "trans_mad_m", "accuracy"],
    "properties": {
        "frames": {"type": "integer", "minimum": 0},
        "skipped": {"type": "integer", "minimum": 0},
        "accuracy": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
    },
}
# documented schema of evaluation.json
EVALUATION_SCHEMA = {
    "type": "object",
    "required": ["command", "reprojection"],
    "properties": {
        "command": {"const": "evaluate"},
        "created": {"type": "string"},
        "reprojection": _STATS,
        "vl": _VL,
    },
}


class UsageError(Exception):
    """Raised for configuration and argument problems (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class Paths:
    data: str | None = None
    intrinsics: str | None = None
    extrinsics: str | None = None
    out: str | None = None
    baseline_intrinsics: str | None = None
    baseline_extrinsics: str | None = None


@dataclass
class EvalConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    pnp_delta: float = 2.0
    vl: bool = False


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)


_TOP = ("sim", "refine", "evaluate", "paths")
_BUDGET_DEG = ("sigma_rot_calib", "sigma_rot_lump")


def _check_keys(obj, allowed, path):
    if not isinstance(obj, dict):
        raise ConfigInvalid("%s: expected a mapping" % path, path)
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigInvalid("%s: unknown key(s) %s" % (path, ", ".join(extra)), "%s.%s" % (path, extra[0]))


def _number(v, path, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigInvalid("%s: expected a finite number" % path, path)
    if positive and v <= 0:
        raise ConfigInvalid("%s: must be positive" % path, path)
    return float(v)


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigInvalid("%s: expected a positive integer" % path, path)
    return v


def _parse_refine(obj, path="refine") -> RefineConfig:
    scalar = ("sigma_rep", "delta_pose", "delta_anchor", "delta_rep", "delta_extrinsic",
              "extrinsic_rot_scale", "extrinsic_trans_scale")
    _check_keys(obj, ("budget", "stages", "anchors", "ablate") + scalar, path)
    cfg = RefineConfig()
    kw = {k: _number(obj[k], "%s.%s" % (path, k), positive=True) for k in scalar if k in obj}

    if "budget" in obj:
        b = obj["budget"]
        names = [f.name for f in fields(PriorBudget)]
        allowed = [n + "_deg" if n in _BUDGET_DEG else n for n in names]
        _check_keys(b, allowed, path + ".budget")
        vals = {}
        for n, key in zip(names, allowed):
            if key in b:
                v = _number(b[key], "%s.budget.%s" % (path, key))
                if v < 0:
                    raise ConfigInvalid("%s.budget.%s: must be non-negative" % (path, key), "%s.budget.%s" % (path, key))
                vals[n] = math.radians(v) if n in _BUDGET_DEG else v
        kw["budget"] = replace(cfg.budget, **vals)

    ablations = []
    if "stages" in obj:
        s = obj["stages"]
        p = path + ".stages"
        _check_keys(s, ("schedule", "max_iterations", "default_max_iterations", "joint_max_iterations",
                        "tol_rel"), p)
        sk = {}
        if "schedule" in s:
            if not isinstance(s["schedule"], list) or not all(isinstance(x, str) for x in s["schedule"]):
                raise ConfigInvalid("%s.schedule: expected a list of stage names" % p, p + ".schedule")
            sk["schedule"] = tuple(s["schedule"])
        if "max_iterations" in s:
            mi = s["max_iterations"]
            if not isinstance(mi, dict):
                raise ConfigInvalid("%s.max_iterations: expected a mapping" % p, p + ".max_iterations")
            sk["max_iterations"] = {k: _int(v, "%s.max_iterations.%s" % (p, k)) for k, v in mi.items()}
        for k in ("default_max_iterations", "joint_max_iterations"):
            if k in s:
                sk[k] = _int(s[k], "%s.%s" % (p, k))
        if "tol_rel" in s:
            sk["tol_rel"] = _number(s["tol_rel"], p + ".tol_rel", positive=True)
        try:
            kw["stages"] = StageConfig(**sk)
        except ValueError as exc:
            raise ConfigInvalid("%s: %s" % (p, exc), p) from exc
    if "ablate" in obj:
        ablations = obj["ablate"]
        if not isinstance(ablations, list) or any(a not in ABLATIONS for a in ablations):
            raise ConfigInvalid("%s.ablate: expected a list drawn from %s" % (path, ", ".join(ABLATIONS)),
                                path + ".ablate")

    if "anchors" in obj:
        a = obj["anchors"]
        p = path + ".anchors"
        _check_keys(a, [f.name for f in fields(AnchorConfig)], p)
        vals = {}
        for k, v in a.items():
            if isinstance(getattr(cfg.anchors, k), bool):
                if not isinstance(v, bool):
                    raise ConfigInvalid("%s.%s: expected true or false" % (p, k), "%s.%s" % (p, k))
                vals[k] = v
            else:
                vals[k] = _number(v, "%s.%s" % (p, k), positive=True)
        kw["anchors"] = replace(cfg.anchors, **vals)
    return replace(cfg, **kw).with_ablations(ablations)


def _parse_eval(obj, path="evaluate") -> EvalConfig:
    _check_keys(obj, ("thresholds", "pnp_delta", "vl"), path)
    cfg = EvalConfig()
    kw = {}
    if "thresholds" in obj:
        th = obj["thresholds"]
        ok = isinstance(th, list) and th and all(isinstance(x, list) and len(x) == 2 for x in th)
        if not ok:
            raise ConfigInvalid("%s.thresholds: expected a list of [meters, degrees] pairs" % path,
                                path + ".thresholds")
        kw["thresholds"] = tuple((_number(m, path + ".thresholds", True), _number(d, path + ".thresholds", True))
                                 for m, d in th)
    if "pnp_delta" in obj:
        kw["pnp_delta"] = _number(obj["pnp_delta"], path + ".pnp_delta", positive=True)
    if "vl" in obj:
        if not isinstance(obj["vl"], bool):
            raise ConfigInvalid("%s.vl: expected true or false" % path, path + ".vl")
        kw["vl"] = obj["vl"]
    return replace(cfg, **kw)


def _parse_paths(obj, base, path="paths") -> Paths:
    names = [f.name for f in fields(Paths)]
    _check_keys(obj, names, path)
    vals = {}
    for k, v in obj.items():
        if not isinstance(v, str):
            raise ConfigInvalid("%s.%s: expected a path string" % (path, k), "%s.%s" % (path, k))
        vals[k] = os.path.normpath(os.path.join(base, v))
    return Paths(**vals)


def parse_config(obj, base_dir=".") -> RunConfig:
    """Build a :class:`RunConfig`; unknown keys anywhere are rejected."""
    if obj is None:
        obj = {}
    _check_keys(obj, _TOP, "config")
    cfg = RunConfig()
    if "sim" in obj:
        cfg.sim = SimConfig.from_dict(obj["sim"], "sim")
    if "refine" in obj:
        cfg.refine = _parse_refine(obj["refine"])
    if "evaluate" in obj:
        cfg.evaluate = _parse_eval(obj["evaluate"])
    if "paths" in obj:
        cfg.paths = _parse_paths(obj["paths"], base_dir)
    return cfg


def _key_line(text, dotted):
    """1-based line of the deepest existing key along ``dotted`` in a YAML/JSON document."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    parts = dotted.split(".")
    if parts and parts[0] == "config":
        parts = parts[1:]
    line = None
    for part in parts:
        if not isinstance(node, yaml.MappingNode):
            break
        for k, v in node.value:
            if k.value == part:
                line = k.start_mark.line + 1
                node = v
                break
        else:
            break
    return line


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError("cannot read config %s: %s" % (path, exc)) from exc
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = "%s:%d" % (path, mark.line + 1) if mark is not None else path
        raise UsageError("%s: invalid YAML/JSON: %s" % (where, getattr(exc, "problem", exc))) from exc
    try:
        return parse_config(obj, os.path.dirname(os.path.abspath(path)))
    except ConfigInvalid as exc:
        line = _key_line(text, exc.path) if exc.path else None
        where = "%s:%d" % (path, line) if line else path
        raise UsageError("%s: %s" % (where, exc)) from exc


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _stamp(obj: dict, args) -> dict:
    if not args.no_timestamp:
        obj["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return obj


def _resolve(flag, from_cfg):
    return os.path.abspath(flag) if flag else from_cfg


def _require(value, name):
    if not value:
        raise UsageError("missing %s (pass --%s or set paths.%s)" % (name, name.replace("_", "-"), name))
    return value


def _write_report(path, obj):
    aio.write_json(obj, path, indent=2)


def _summary(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    sim = cfg.sim
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    try:
        sim.validate()
    except ConfigInvalid as exc:
        raise UsageError(str(exc)) from exc
    out = _require(_resolve(args.out, cfg.paths.out), "out")
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    ds = simulate(sim)
    aio.save_dataset(ds, out)
    _write_report(os.path.join(out, RUN_JSON), _stamp({"command": "simulate", "config": sim.as_dict()}, args))
    print("wrote %d frames to %s" % (len(ds.ins), out))
    return EXIT_OK


def _dataset(args, cfg: RunConfig, need_vl=False):
    data = _require(_resolve(args.data, cfg.paths.data), "data")
    K = _resolve(args.intrinsics, cfg.paths.intrinsics)
    T = _resolve(args.extrinsics, cfg.paths.extrinsics)
    return aio.load_dataset(data, K, T, need_vl=need_vl)


def cmd_refine(args, cfg: RunConfig) -> int:
    rcfg = cfg.refine.with_ablations(args.ablate or ())
    out = _require(_resolve(args.out, cfg.paths.out), "out")
    ds = _dataset(args, cfg)
    if args.validate_only:
        print("dataset ok: %d frames" % len(ds.ins))
        return EXIT_OK
    os.makedirs(out, exist_ok=True)
    report = {"command": "refine", "ablations": sorted(rcfg.stages.ablations),
              "schedule": list(rcfg.stages.effective_schedule())}
    try:
        res = refine(ds, rcfg)
    except StageError as exc:
        report.update(status="failed", error=str(exc), stages=[r.as_dict() for r in exc.reports])
        _write_report(os.path.join(out, REPORT_JSON), _stamp(report, args))
        raise
    except NoConvergence as exc:
        best = getattr(exc, "best", None)
        report.update(status="failed", error=str(exc))
        if best is not None:
            report["extrinsic"] = best.report()
            aio.dump_pose(best.T_opt, os.path.join(out, OUT_EXTRINSICS))
        _write_report(os.path.join(out, REPORT_JSON), _stamp(report, args))
        raise
    res.K.dump(os.path.join(out, OUT_INTRINSICS))
    aio.dump_pose(res.T, os.path.join(out, OUT_EXTRINSICS))
    aio.write_poses(res.frames, res.cam_poses, os.path.join(out, OUT_POSES))
    dump_anchors(res.anchors, os.path.join(out, aio.ANCHORS))
    before = evaluate_reprojection(res.anchors, calibration_poses(ds.ins, ds.T_init), ds.K_init)
    after = evaluate_reprojection(res.anchors, calibration_poses(ds.ins, res.T), res.K)
    report.update(status="ok", **res.report())
    report["reprojection"] = {"before": before.as_dict(), "after": after.as_dict()}
    _write_report(os.path.join(out, REPORT_JSON), _stamp(report, args))
    _summary({"reprojection_median_px": [before.median, after.median],
              "stages": [r.stage for r in res.stage_reports], "out": out})
    return EXIT_OK


def _gt_vl_poses(ds):
    if not ds.truth or "vl_poses" not in ds.truth:
        raise aio.DataFormatError("VL benchmark needs ground-truth VL poses in %s" % aio.TRUTH)
    try:
        return {int(r["t"]): aio.Pose.from_json(r) for r in ds.truth["vl_poses"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise aio.DataFormatError("bad vl_poses in %s: %s" % (aio.TRUTH, exc)) from exc


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ecfg = cfg.evaluate
    want_vl = bool(args.vl or ecfg.vl)
    ds = _dataset(args, cfg, need_vl=want_vl)
    out = _resolve(args.out, cfg.paths.out)
    if args.validate_only:
        print("dataset ok: %d frames" % len(ds.ins))
        return EXIT_OK
    from .anchors import build_anchors

    anchors = build_anchors(ds.correspondences, ds.ortho, ds.dem, cfg.refine.anchors)
    try:
        rep = evaluate_reprojection(anchors, calibration_poses(ds.ins, ds.T_init), ds.K_init)
    except EmptyInput as exc:
        raise aio.DataFormatError(str(exc)) from exc
    report = {"command": "evaluate", "reprojection": rep.as_dict()}
    if want_vl:
        vl = vl_benchmark(ds.vl_frames, ds.K_init, ds.T_init, _gt_vl_poses(ds), ecfg.thresholds, ecfg.pnp_delta)
        report["vl"] = vl.as_dict()
    _stamp(report, args)
    if out:
        os.makedirs(out, exist_ok=True)
        _write_report(os.path.join(out, EVALUATION_JSON), report)
    _summary(report)
    return EXIT_OK


def cmd_bench_vl(args, cfg: RunConfig) -> int:
    ecfg = cfg.evaluate
    ds = _dataset(args, cfg, need_vl=True)
    out = _resolve(args.out, cfg.paths.out)
    gt = _gt_vl_poses(ds)
    bK = _resolve(args.baseline_intrinsics, cfg.paths.baseline_intrinsics)
    bT = _resolve(args.baseline_extrinsics, cfg.paths.baseline_extrinsics)
    base = None
    if bK or bT:
        data = _resolve(args.data, cfg.paths.data)
        base = (aio.load_intrinsics(bK or os.path.join(data, aio.INIT_INTRINSICS)),
                aio.load_pose(bT or os.path.join(data, aio.INIT_EXTRINSICS)))
    if args.validate_only:
        print("dataset ok: %d VL frames" % len(ds.vl_frames))
        return EXIT_OK
    cur = vl_benchmark(ds.vl_frames, ds.K_init, ds.T_init, gt, ecfg.thresholds, ecfg.pnp_delta)
    report = {"command": "bench-vl", "vl": cur.as_dict()}
    if base is not None:
        ref = vl_benchmark(ds.vl_frames, base[0], base[1], gt, ecfg.thresholds, ecfg.pnp_delta)
        report["baseline"] = ref.as_dict()
        if ref.rot_median > 0:
            report["rot_median_ratio"] = cur.rot_median / ref.rot_median
    _stamp(report, args)
    if out:
        os.makedirs(out, exist_ok=True)
        _write_report(os.path.join(out, VL_JSON), report)
    _summary(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override sim.seed")
    common.add_argument("--ablate", action="append", choices=ABLATIONS, help="repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--no-timestamp", action="store_true", help="omit the 'created' field")
    common.add_argument("--validate-only", action="store_true", help="check inputs and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory")
    data.add_argument("--intrinsics", help="calibration to start from or evaluate")
    data.add_argument("--extrinsics", help="extrinsic to start from or evaluate")

    p = _Parser(prog="anchorcal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("refine", parents=[common, data], help="refine intrinsics and extrinsics")
    e = sub.add_parser("evaluate", parents=[common, data], help="reprojection (and VL) metrics")
    e.add_argument("--vl", action="store_true", help="also run the VL benchmark")
    b = sub.add_parser("bench-vl", parents=[common, data], help="frame-wise PnP localization benchmark")
    b.add_argument("--baseline-intrinsics")
    b.add_argument("--baseline-extrinsics")
    return p


COMMANDS = {"simulate": cmd_simulate, "refine": cmd_refine, "evaluate": cmd_evaluate, "bench-vl": cmd_bench_vl}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, SingularSystem, NoConvergence, InsufficientFrames, BehindCamera) as exc:
        print("solver error: %s" % exc, file=sys.stderr)
        return EXIT_SOLVER
    except (aio.DataFormatError, FileNotFoundError, EmptyInput) as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
