"""Command line interface: synth, train, sample, eval, inspect and ablate.

Settings resolve as flags > ``--config`` file > built-in defaults. A config
file holds flat ``key = value`` lines (``#`` comments allowed); a run's own
``manifest.json`` is accepted too. Every run writes ``manifest.json`` and
``config.txt`` with the fully resolved settings into ``--out``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import GenerationConfig, Session
from .data import load_sessions, save_sessions, synth_corpus
from .generator import TrainConfig, generate_session, model_normalizer, train
from .losses import AUPairRegistry
from .metrics import boundary_jump, fr_corr, fr_div, fr_dvs, fr_syn, fr_var, frechet_coeff_distance, symmetric_pair_gap
from .schedule import build_cosine_schedule
from .score_net import NetConfig, ScoreNet

log = logging.getLogger("reactgen")

SOLVER_FLAGS = {"ode": "ode_2m", "sde": "sde_2m", "euler": "euler_reference"}

DEFAULTS: dict = {
    "seed": 0,
    "steps": 50,
    "solver": "sde",
    "eta": 1.0,
    "guidance": 1.5,
    "m_samples": 3,
    "window": 16,
    "lambda_fac": 1e-4,
    "gate": 5,
    "timestamp": True,
    "face": True,
    "audio": True,
    "fbk": True,
    "fac": True,
    "jobs": 1,
    "out": "out",
    # corpus
    "sessions": 16,
    "listeners": 3,
    "windows": 8,
    "audio_dim": 16,
    # model and training
    "hidden": 64,
    "blocks": 2,
    "embed": 32,
    "iterations": 2000,
    "batch_size": 32,
    "lr": 3e-3,
    "full_scale": False,
    "max_lag": 48,
}

TOGGLES = ("timestamp", "face", "audio", "fbk", "fac", "solver", "steps")


class UsageError(Exception):
    pass


# -- config -------------------------------------------------------------------

def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError:
            raise UsageError(f"config key {key!r} expects a number, got {raw!r}") from None
        return text
    return raw


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        items = data.get("config", data).items()
    else:
        items = []
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            items.append((k.strip().replace("-", "_"), v))
    out = {}
    for k, v in items:
        if k not in DEFAULTS:
            raise UsageError(f"unknown config key {k!r} in {path}")
        out[k] = _coerce(k, v)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["solver"] not in SOLVER_FLAGS:
        raise UsageError(f"solver must be one of {sorted(SOLVER_FLAGS)}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def generation_config(cfg: dict) -> GenerationConfig:
    return GenerationConfig(T=cfg["steps"], solver=SOLVER_FLAGS[cfg["solver"]], eta=cfg["eta"],
                            guidance_scale=cfg["guidance"], m_samples=cfg["m_samples"], seed=cfg["seed"],
                            constraint_gate_step=cfg["gate"], use_timestamp=cfg["timestamp"])


def train_config(cfg: dict) -> TrainConfig:
    base = dict(lambda_fac=cfg["lambda_fac"], gate=cfg["gate"], use_fbk=cfg["fbk"], use_fac=cfg["fac"], seed=cfg["seed"])
    if cfg["full_scale"]:
        return TrainConfig.full_scale(**base)
    return TrainConfig(iterations=cfg["iterations"], batch_size=cfg["batch_size"], lr=cfg["lr"], **base)


def net_config(cfg: dict, audio_dim: int) -> NetConfig:
    return NetConfig(audio_dim=audio_dim, window=cfg["window"], hidden=cfg["hidden"], blocks=cfg["blocks"],
                     embed=cfg["embed"], use_face=cfg["face"], use_audio=cfg["audio"], use_timestamp=cfg["timestamp"])


def write_manifest(out: Path, command: str, cfg: dict, **extra) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": __version__, "seed": cfg["seed"], "config_hash": config_hash(cfg),
                "solver": SOLVER_FLAGS[cfg["solver"]], "steps": cfg["steps"], "config": cfg, **extra}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in sorted(cfg.items())))
    return manifest


# -- shared helpers -----------------------------------------------------------

def _load_corpus(path) -> list[Session]:
    if not path:
        raise UsageError("this command needs --data <sessions.jsonl>")
    return load_sessions(path)


def _corpus_or_synth(args, cfg) -> list[Session]:
    if args.data:
        return load_sessions(args.data)
    return synth_corpus(cfg["sessions"], cfg["listeners"], cfg["window"], cfg["windows"], seed=cfg["seed"],
                        audio_dim=cfg["audio_dim"])


def _fit(corpus, cfg) -> tuple[ScoreNet, object]:
    net = ScoreNet(net_config(cfg, corpus[0].speaker_audio.shape[1]), seed=cfg["seed"])
    history = train(corpus, net, hyper=train_config(cfg))
    return net, history


def _generate_all(net, sessions, gen: GenerationConfig, jobs: int) -> list[list[np.ndarray]]:
    def one(s):
        return generate_session(s, net, gen)

    if jobs > 1 and len(sessions) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, sessions))
    return [one(s) for s in sessions]


def evaluate(generated: list[list[np.ndarray]], sessions: list[Session], max_lag: int = 48,
             registry: AUPairRegistry | None = None) -> tuple[dict, list[dict]]:
    """Corpus-level metric report plus per-session rows.

    ``generated[k]`` holds the samples for ``sessions[k]``.
    """
    registry = registry or AUPairRegistry.default()
    rows = []
    for samples, s in zip(generated, sessions):
        lag = min(max_lag, s.speaker_face.shape[0] - 1)
        rows.append({
            "session_id": s.session_id,
            "frvar": fr_var(samples),
            "frdiv": fr_div(samples) if len(samples) > 1 else float("nan"),
            "frcorr": fr_corr(samples, s.listeners),
            "frsyn": float(np.mean([fr_syn(s.speaker_face, g, lag) for g in samples])),
            "boundary_jump": float(np.mean([boundary_jump(g, s.w) for g in samples])),
            "symmetric_gap": float(np.mean([symmetric_pair_gap(g, registry.symmetric) for g in samples])),
        })
    report = {k: float(np.nanmean([r[k] for r in rows])) if rows else float("nan")
              for k in ("frvar", "frdiv", "frcorr", "frsyn", "boundary_jump", "symmetric_gap")}
    firsts = [g[0] for g in generated]
    H = min(x.shape[0] for x in firsts)
    report["frdvs"] = fr_dvs([x[:H] for x in firsts]) if len(firsts) > 1 else float("nan")
    flat_gen = [x for g in generated for x in g]
    flat_gt = [x for s in sessions for x in s.listeners]
    report["fcd"] = frechet_coeff_distance(flat_gen, flat_gt) if len(flat_gen) > 1 and len(flat_gt) > 1 else float("nan")
    return report, rows


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def save_samples(path, sessions, generated) -> None:
    with open(path, "w") as fh:
        for s, samples in zip(sessions, generated):
            for m, seq in enumerate(samples):
                fh.write(json.dumps({"session_id": s.session_id, "sample": m, "frames": np.asarray(seq).tolist()}) + "\n")


def load_samples(path) -> dict[str, list[np.ndarray]]:
    """Generated sequences grouped by session id.

    Accepts the ``sample`` output format or a session file, whose listeners
    are then read as the samples.
    """
    out: dict[str, list] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
            if "frames" in rec:
                out.setdefault(str(rec["session_id"]), []).append(np.asarray(rec["frames"], dtype=float))
            elif "listeners" in rec:
                out.setdefault(str(rec["session_id"]), []).extend(np.asarray(x, dtype=float) for x in rec["listeners"])
            else:
                raise ValueError(f"{path}:{n}: record has neither 'frames' nor 'listeners'")
    return out


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        wr.writeheader()
        wr.writerows(rows)


def _svg_lines(series: dict[str, list[float]], title: str) -> str:
    """Minimal SVG line chart, one polyline per series."""
    W, H, pad = 640, 360, 40
    allv = [v for ys in series.values() for v in ys]
    lo, hi = min(allv), max(allv)
    span = hi - lo or 1.0
    n = max(len(ys) for ys in series.values())
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="none" stroke="#999"/>']
    for c, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{pad + i * (W - 2 * pad) / max(n - 1, 1):.1f},{H - pad - (y - lo) / span * (H - 2 * pad):.1f}"
                       for i, y in enumerate(ys))
        col = colors[c % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{W - pad - 80}" y="{pad + 16 * (c + 1)}" font-size="12" fill="{col}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = Path(cfg["out"])
    corpus = synth_corpus(cfg["sessions"], cfg["listeners"], cfg["window"], cfg["windows"], seed=cfg["seed"],
                          audio_dim=cfg["audio_dim"])
    out.mkdir(parents=True, exist_ok=True)
    save_sessions(corpus, out / "corpus.jsonl")
    write_manifest(out, "synth", cfg, outputs=["corpus.jsonl"])
    print(f"wrote {len(corpus)} sessions to {out / 'corpus.jsonl'}")
    return 0


def cmd_train(args, cfg) -> int:
    out = Path(cfg["out"])
    corpus = _corpus_or_synth(args, cfg)
    net, history = _fit(corpus, cfg)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "model.ckpt", extra=net.extra)
    (out / "loss_curve.csv").write_text(history.to_csv())
    last = history.rows[-1] if history.rows else {}
    write_manifest(out, "train", cfg, inputs={"data": args.data}, outputs=["model.ckpt", "loss_curve.csv"],
                   final_loss={k: last.get(k) for k in ("dm", "fbk", "fac", "total")})
    print(f"trained {len(history.rows)} iterations; model at {out / 'model.ckpt'}")
    return 0


def cmd_sample(args, cfg) -> int:
    if not args.model:
        raise UsageError("sample needs --model <checkpoint>")
    out = Path(cfg["out"])
    net = ScoreNet.load(args.model)
    sessions = _load_corpus(args.speaker)
    gen = generation_config(cfg)
    generated = _generate_all(net, sessions, gen, cfg["jobs"])
    out.mkdir(parents=True, exist_ok=True)
    save_samples(out / "samples.jsonl", sessions, generated)
    write_manifest(out, "sample", cfg, inputs={"model": args.model, "speaker": args.speaker}, outputs=["samples.jsonl"])
    print(f"wrote {sum(len(g) for g in generated)} sequences to {out / 'samples.jsonl'}")
    return 0


def cmd_eval(args, cfg) -> int:
    if not args.generated:
        raise UsageError("eval needs --generated <samples.jsonl>")
    out = Path(cfg["out"])
    sessions = _load_corpus(args.reference)
    by_id = load_samples(args.generated)
    missing = [s.session_id for s in sessions if s.session_id not in by_id]
    if missing:
        raise ValueError(f"no generated sequences for sessions: {', '.join(missing[:5])}")
    generated = [by_id[s.session_id] for s in sessions]
    report, rows = evaluate(generated, sessions, cfg["max_lag"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n")
    _write_rows(out / "per_session.csv", rows)
    write_manifest(out, "eval", cfg, inputs={"generated": args.generated, "reference": args.reference},
                   outputs=["metrics.json", "per_session.csv"])
    print(json.dumps(_json_safe(report), sort_keys=True))
    return 0


def cmd_inspect(args, cfg) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "schedule":
        sched = build_cosine_schedule(cfg["steps"])
        (out / "schedule.csv").write_text(sched.to_csv())
        write_manifest(out, "inspect schedule", cfg, outputs=["schedule.csv"])
        print(f"wrote {out / 'schedule.csv'}")
        return 0

    sessions = _load_corpus(args.speaker) if args.speaker else synth_corpus(1, 2, cfg["window"], 2, seed=cfg["seed"],
                                                                            audio_dim=cfg["audio_dim"])
    if args.model:
        net = ScoreNet.load(args.model)
    else:
        net = ScoreNet(net_config(cfg, sessions[0].speaker_audio.shape[1]), seed=cfg["seed"])
    norm = model_normalizer(net)
    first = sessions[0].speaker[:1]
    rows, series = [], {}
    for flag in ("ode", "sde"):
        gen = generation_config({**cfg, "solver": flag}).replace(m_samples=1)
        _, trajs = generate_session(first, net, gen, return_trajectories=True)
        means = [float(norm.decode(state).mean()) for state in trajs[0].states]
        series[flag] = means
        rows += [{"solver": SOLVER_FLAGS[flag], "step": i, "mean_coefficient": v} for i, v in enumerate(means)]
    _write_rows(out / "trajectory.csv", rows)
    outputs = ["trajectory.csv"]
    if args.svg:
        (out / "trajectory.svg").write_text(_svg_lines(series, "mean coefficient per solver step"))
        outputs.append("trajectory.svg")
    write_manifest(out, "inspect trajectory", cfg, inputs={"model": args.model, "speaker": args.speaker},
                   outputs=outputs)
    print(f"wrote {out / 'trajectory.csv'}")
    return 0


def _ablation_variant(cfg: dict, toggle: str, ablate_steps: int) -> dict:
    if toggle == "solver":
        return {**cfg, "solver": "ode" if cfg["solver"] != "ode" else "sde"}
    if toggle == "steps":
        return {**cfg, "steps": ablate_steps}
    return {**cfg, toggle: not cfg[toggle]}


def cmd_ablate(args, cfg) -> int:
    toggles = args.toggle or list(TOGGLES)
    out = Path(cfg["out"])
    corpus = _corpus_or_synth(args, cfg)
    if args.heldout:
        held = load_sessions(args.heldout)
    else:
        held = synth_corpus(max(2, cfg["sessions"] // 4), cfg["listeners"], cfg["window"], cfg["windows"],
                            seed=cfg["seed"] + 7919, audio_dim=cfg["audio_dim"])
    training_keys = ("timestamp", "face", "audio", "fbk", "fac")
    models: dict = {}

    def model_for(c):
        key = tuple(c[k] for k in training_keys)
        if key not in models:
            models[key] = _fit(corpus, c)[0]
        return models[key]

    rows = []
    runs = [("baseline", cfg)] + [(t, _ablation_variant(cfg, t, args.ablate_steps)) for t in toggles]
    for name, c in runs:
        net = model_for(c)
        report, _ = evaluate(_generate_all(net, held, generation_config(c), c["jobs"]), held, c["max_lag"])
        row = {"run": name, **{k: c[k] for k in ("timestamp", "face", "audio", "fbk", "fac", "solver", "steps")},
               **report, "config_hash": config_hash(c)}
        rows.append(row)
        write_manifest(out / "runs" / name, "ablate", c, metrics=_json_safe(report))
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "ablation.csv", rows)
    write_manifest(out, "ablate", cfg, toggles=toggles, outputs=["ablation.csv"])
    for r in rows:
        print(f"{r['run']:>10}  frdiv={r['frdiv']:.4f}  frcorr={r['frcorr']:.4f}  frsyn={r['frsyn']:.1f}  "
              f"jump={r['boundary_jump']:.4f}  symgap={r['symmetric_gap']:.4f}")
    return 0


# -- parser -------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared settings")
    g.add_argument("--config", help="flat key=value file (or a manifest.json)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--steps", type=int, help="diffusion steps T at sampling")
    g.add_argument("--solver", choices=sorted(SOLVER_FLAGS))
    g.add_argument("--eta", type=float)
    g.add_argument("--guidance", type=float)
    g.add_argument("--m-samples", dest="m_samples", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--lambda-fac", dest="lambda_fac", type=float)
    g.add_argument("--gate", type=int)
    g.add_argument("--jobs", type=int)
    g.add_argument("--max-lag", dest="max_lag", type=int)
    for name in ("timestamp", "face", "audio", "fbk", "fac"):
        g.add_argument(f"--no-{name}", dest=name, action="store_const", const=False)
    c = p.add_argument_group("corpus")
    c.add_argument("--sessions", type=int)
    c.add_argument("--listeners", type=int)
    c.add_argument("--windows", type=int, help="windows per session")
    c.add_argument("--audio-dim", dest="audio_dim", type=int)
    t = p.add_argument_group("model and training")
    t.add_argument("--hidden", type=int)
    t.add_argument("--blocks", type=int)
    t.add_argument("--embed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--full-scale", dest="full_scale", action="store_const", const=True,
                   help="batch 100, 30k iterations, lr 1e-4")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="reactgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="train a model; writes model.ckpt and loss_curve.csv")
    p.add_argument("--data", help="session JSONL (default: synthesize from the corpus settings)")

    p = sub.add_parser("sample", parents=[common], help="generate listener sequences")
    p.add_argument("--model", help="checkpoint from train")
    p.add_argument("--speaker", help="session JSONL providing the speaker streams")

    p = sub.add_parser("eval", parents=[common], help="metric report for generated sequences")
    p.add_argument("--generated", help="samples.jsonl from sample, or a session file")
    p.add_argument("--reference", help="session JSONL with ground-truth listeners")

    p = sub.add_parser("inspect", parents=[common], help="diagnostic CSVs")
    p.add_argument("what", choices=("schedule", "trajectory"))
    p.add_argument("--model")
    p.add_argument("--speaker")
    p.add_argument("--svg", action="store_true", help="also draw trajectory.svg")

    p = sub.add_parser("ablate", parents=[common], help="train and compare toggled variants")
    p.add_argument("--data")
    p.add_argument("--heldout", help="session JSONL to evaluate on (default: fresh synthetic sessions)")
    p.add_argument("--toggle", action="append", choices=TOGGLES)
    p.add_argument("--ablate-steps", dest="ablate_steps", type=int, default=2)
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "inspect": cmd_inspect, "ablate": cmd_ablate}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"reactgen: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
