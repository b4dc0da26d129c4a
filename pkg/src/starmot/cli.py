"""Command-line entry point: ``starmot <generate|run|eval|sweep|scenario validate>``.

Every flag can also come from a key-value file passed with ``--config``:
one ``key = value`` per line, ``#`` starts a comment, keys are the flag
names without the leading dashes (``-`` and ``_`` are interchangeable).
Flags given on the command line override the file.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._validation import ConfigError
from .geometry import Box3, Pose
from .metrics import clear_mot, trajectory_errors
from .pipeline import ABLATIONS, FrameRecord, RunConfig, RunRecord, evaluate, run
from .simulator import NoiseSpec, SimConfig, congested_config, generate, inject_noise, load_scenario, save_scenario, \
    validate_scenario

log = logging.getLogger("starmot")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# flag name -> (parser, default)
_OPTIONS = {
    "scenario": (str, None),
    "seed": (int, 0),
    "k": (int, 1),
    "L": (float, 5.0),
    "tau": (float, 0.5),
    "lambda": (None, "0.3,0.4,0.3"),
    "K": (int, 3),
    "window_w": (int, 4),
    "window_size": (int, 8),
    "noise_sigma": (str, ""),
    "ablate": (str, ""),
    "dump_residuals": (None, False),
    "out": (str, "out"),
    "family": (str, "default"),
    "n_agents": (int, None),
    "n_frames": (int, None),
    "run": (str, None),
    "match_thresh": (float, 2.0),
    "no_align": (None, False),
    "seeds": (int, 5),
    "sigmas": (str, "0,0.2,0.4,0.6,0.8"),
    "variants": (str, "full,spatial"),
    "concurrency": (None, False),
    "promote_moving": (None, False),
    "verbose": (None, False),
}
_BOOL = {"dump_residuals", "no_align", "concurrency", "promote_moving", "verbose"}


class CliError(Exception):
    pass


def _bool(name, v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(name, f"expected a boolean, got {v!r}")


def _norm_key(k: str) -> str:
    k = k.strip().lstrip("-").replace("-", "_")
    if k.lower() == "l" and k == "l":
        return "L"
    return k


def read_config_file(path) -> dict:
    """Parse the ``key = value`` format; unknown keys are configuration errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError("config", f"{path}:{n}: expected 'key = value'")
        key = _norm_key(key)
        if key not in _OPTIONS:
            raise ConfigError(key, f"{path}:{n}: unknown key")
        out[key] = val.strip()
    return out


def _coerce(name, value):
    if value is None:
        return None
    if name in _BOOL:
        return _bool(name, value)
    conv = _OPTIONS[name][0]
    if conv is None or isinstance(value, conv):
        return value
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot parse {value!r}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < command-line flags."""
    opts = {k: d for k, (_, d) in _OPTIONS.items()}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            opts[k] = _coerce(k, v)
    for k in _OPTIONS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = _coerce(k, v)
    return opts


def parse_lambda(text) -> tuple:
    if isinstance(text, (tuple, list)):
        vals = [float(x) for x in text]
    else:
        try:
            vals = [float(x) for x in str(text).split(",")]
        except ValueError:
            raise ConfigError("lambda", f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise ConfigError("lambda", f"expected three comma-separated numbers, got {text!r}")
    return tuple(vals)


def parse_ablate(text) -> tuple:
    items = tuple(a.strip() for a in str(text or "").split(",") if a.strip())
    for a in items:
        if a not in ABLATIONS:
            raise ConfigError("ablate", f"unknown ablation {a!r}; choose from {', '.join(ABLATIONS)}")
    return items


def run_config(opts: dict) -> RunConfig:
    return RunConfig(
        K=opts["K"], L=opts["L"], tau=opts["tau"], weights=parse_lambda(opts["lambda"]),
        keyframe_stride=opts["k"], window_w=opts["window_w"], window_size=opts["window_size"],
        ablate=parse_ablate(opts["ablate"]), concurrency=opts["concurrency"], promote_moving=opts["promote_moving"],
    )


def sim_config(opts: dict) -> SimConfig:
    over = {k: opts[k] for k in ("n_agents", "n_frames") if opts[k] is not None}
    if opts["family"] == "congested":
        return congested_config(**over).validate()
    if opts["family"] != "default":
        raise ConfigError("family", f"expected 'default' or 'congested', got {opts['family']!r}")
    return SimConfig(**over).validate()


def _out_dir(opts) -> Path:
    p = Path(opts["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load(opts):
    if not opts["scenario"]:
        raise ConfigError("scenario", "a scenario file is required (--scenario)")
    try:
        s = load_scenario(opts["scenario"])
    except OSError as exc:
        raise ConfigError("scenario", f"cannot read {opts['scenario']}: {exc}") from None
    noise = NoiseSpec.parse(opts["noise_sigma"])
    return inject_noise(s, noise, opts["seed"]) if (noise.touches_detections or noise.touches_ego) else s


# -- subcommands -------------------------------------------------------------

def cmd_generate(opts) -> int:
    cfg = sim_config(opts)
    s = generate(cfg, opts["seed"])
    noise = NoiseSpec.parse(opts["noise_sigma"])
    if noise.touches_detections or noise.touches_ego:
        s = inject_noise(s, noise, opts["seed"])
    path = _out_dir(opts) / "scenario.jsonl"
    save_scenario(s, path)
    print(path)
    return EXIT_OK


def cmd_validate(opts) -> int:
    if not opts["scenario"]:
        raise ConfigError("scenario", "a scenario file is required (--scenario)")
    try:
        s = load_scenario(opts["scenario"])
    except (KeyError, ValueError) as exc:
        print(f"invalid scenario: {exc}")
        return EXIT_RUNTIME
    problems = validate_scenario(s)
    for p in problems:
        print(p)
    if problems:
        return EXIT_RUNTIME
    print(f"ok: {len(s.frames)} frames, {len(s.agents)} agents")
    return EXIT_OK


def cmd_run(opts) -> int:
    s = _load(opts)
    cfg = run_config(opts)
    rec = run(s, cfg)
    out = _out_dir(opts)
    (out / "run_record.json").write_text(rec.to_json(), encoding="utf-8")
    (out / "timings.json").write_text(json.dumps(rec.timing_summary(), indent=2), encoding="utf-8")
    if opts["dump_residuals"]:
        (out / "residuals.csv").write_text(rec.residuals_csv(), encoding="utf-8")
    for d in rec.diagnostics:
        log.warning(d)
    print(out / "run_record.json")
    return EXIT_OK


def load_record(path) -> RunRecord:
    d = json.loads(Path(path).read_text(encoding="utf-8"))

    def pose(x):
        return Pose(np.asarray(x["rotation"]), np.asarray(x["translation"]))

    frames = []
    for f in d["frames"]:
        tracks = tuple((t["id"], Box3(t["center"], t["dims"], t["yaw"]), t["status"]) for t in f["tracks"])
        frames.append(FrameRecord(f["index"], f["keyframe"], pose(f["ego_pre"]), pose(f["ego_post"]), tracks,
                                  tuple(tuple(m) for m in f["matches"]), tuple(f["births"])))
    traces = [(t["frame"], t["stage"], tuple(t["costs"])) for t in d["traces"]]
    return RunRecord(frames, [pose(p) for p in d["ego_final"]], traces, d["diagnostics"], d["births_total"],
                     d["config"])


def cmd_eval(opts) -> int:
    s = _load(opts)
    if not opts["run"]:
        raise ConfigError("run", "a run record is required (--run)")
    try:
        rec = load_record(opts["run"])
    except OSError as exc:
        raise ConfigError("run", f"cannot read {opts['run']}: {exc}") from None
    align = not opts["no_align"]
    mot = clear_mot(rec.est_tracks(), s, opts["match_thresh"])
    traj = trajectory_errors(rec.ego_final, [f.ego_gt for f in s.frames], align)
    out = _out_dir(opts)
    (out / "mot.json").write_text(mot.to_json(), encoding="utf-8")
    (out / "mot_per_frame.csv").write_text(mot.per_frame_csv(), encoding="utf-8")
    (out / "trajectory.json").write_text(traj.to_json(), encoding="utf-8")
    (out / "trajectory_per_frame.csv").write_text(traj.per_frame_csv(), encoding="utf-8")
    summary = {"mota": mot.mota, "motp": mot.motp, "ids": mot.ids, "recall": mot.recall,
               "precision": mot.precision, "ape_rmse": traj.ape_rmse, "rpe_rmse": traj.rpe_rmse}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


_VARIANTS = {
    "full": {},
    "spatial": {"weights": (0.0, 1.0, 0.0)},
    "spatial+neighborhood": {"ablate": ("shape",)},
    "no-ocow": {"ablate": ("ocow",)},
    "no-oefw": {"ablate": ("oefw",)},
}


def cmd_sweep(opts) -> int:
    from dataclasses import replace

    base = run_config(opts)
    sim = sim_config(opts)
    try:
        sigmas = [float(x) for x in str(opts["sigmas"]).split(",") if x.strip()]
    except ValueError:
        raise ConfigError("sigmas", f"expected comma-separated numbers, got {opts['sigmas']!r}") from None
    variants = [v.strip() for v in str(opts["variants"]).split(",") if v.strip()]
    for v in variants:
        if v not in _VARIANTS:
            raise ConfigError("variants", f"unknown variant {v!r}; choose from {', '.join(_VARIANTS)}")
    rows = []
    for seed in range(opts["seed"], opts["seed"] + opts["seeds"]):
        scen = generate(sim, seed)
        for sigma in sigmas:
            noisy = inject_noise(scen, NoiseSpec(sigma_pos=sigma), seed)
            for v in variants:
                cfg = replace(base, **_VARIANTS[v])
                m = evaluate(run(noisy, cfg), noisy)
                rows.append({"seed": seed, "sigma": sigma, "variant": v, **m})
                log.info("seed %d sigma %.2f %s: MOTA %.2f", seed, sigma, v, m["mota"])
    out = _out_dir(opts)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = {}
    for v in variants:
        for sigma in sigmas:
            sel = [r for r in rows if r["variant"] == v and r["sigma"] == sigma]
            summary.setdefault(v, {})[str(sigma)] = {
                "mota": float(np.mean([r["mota"] for r in sel])),
                "ape_rmse": float(np.mean([r["ape_rmse"] for r in sel])),
            }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value config file; flags override it")
    p.add_argument("--seed", type=str, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--noise-sigma", dest="noise_sigma", default=None,
                   help="extra noise: '0.4' (position) or 'pos=0.4,yaw=0.02,odom_t=0.01'")
    p.add_argument("--verbose", action="store_const", const=True, default=None)


def _add_tracker(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", default=None, help="keyframe stride")
    p.add_argument("--K", default=None, help="star-graph neighbours")
    p.add_argument("--L", default=None, help="neighbour / candidate radius in metres (default 5.0)")
    p.add_argument("--tau", default=None, help="association gate (default 0.5)")
    p.add_argument("--lambda", dest="lambda", default=None, help="cue weights neighborhood,spatial,shape")
    p.add_argument("--window-w", dest="window_w", default=None, help="promotion threshold w")
    p.add_argument("--window-size", dest="window_size", default=None, help="sliding window length in frames")
    p.add_argument("--ablate", default=None, help=f"comma list of {','.join(ABLATIONS)}")
    p.add_argument("--concurrency", action="store_const", const=True, default=None)
    p.add_argument("--promote-moving", dest="promote_moving", action="store_const", const=True, default=None)


def _add_sim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", default=None, help="default | congested")
    p.add_argument("--n-agents", dest="n_agents", default=None)
    p.add_argument("--n-frames", dest="n_frames", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="starmot", description="Star-graph 3D tracking with object-centric SLAM.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scenario file")
    _add_common(g)
    _add_sim(g)

    r = sub.add_parser("run", help="track and optimize a scenario")
    _add_common(r)
    _add_tracker(r)
    r.add_argument("--scenario", default=None)
    r.add_argument("--dump-residuals", dest="dump_residuals", action="store_const", const=True, default=None,
                   help="write residuals.csv (iteration, stage, total_cost)")

    e = sub.add_parser("eval", help="score a run record against its scenario")
    _add_common(e)
    e.add_argument("--scenario", default=None)
    e.add_argument("--run", default=None, help="run_record.json written by 'run'")
    e.add_argument("--match-thresh", dest="match_thresh", default=None)
    e.add_argument("--no-align", dest="no_align", action="store_const", const=True, default=None)

    w = sub.add_parser("sweep", help="noise / ablation grid over generated scenarios")
    _add_common(w)
    _add_tracker(w)
    _add_sim(w)
    w.add_argument("--seeds", default=None, help="number of seeds, starting at --seed")
    w.add_argument("--sigmas", default=None, help="comma list of detection position sigmas")
    w.add_argument("--variants", default=None, help=f"comma list of {','.join(_VARIANTS)}")

    sc = sub.add_parser("scenario", help="scenario file utilities")
    scs = sc.add_subparsers(dest="scenario_command", required=True)
    v = scs.add_parser("validate", help="check scenario invariants")
    v.add_argument("--config", default=None)
    v.add_argument("--scenario", default=None)
    v.add_argument("scenario_path", nargs="?", default=None)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if getattr(args, "scenario_path", None) and not getattr(args, "scenario", None):
        args.scenario = args.scenario_path
    try:
        opts = resolve(args)
        logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.command == "generate":
            return cmd_generate(opts)
        if args.command == "run":
            return cmd_run(opts)
        if args.command == "eval":
            return cmd_eval(opts)
        if args.command == "sweep":
            return cmd_sweep(opts)
        return cmd_validate(opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past configuration is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
