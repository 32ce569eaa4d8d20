"""Command-line entry point.

Subcommands::

    simulate  --script S | --protocol gait|task   --seed N --out DIR
    listen    --port P --out DIR --duration T
    replay    --session DIR --target HOST:PORT --rate REAL|MAX
    analyze   --session DIR [--thresholds FILE] [--out DIR]
    train     --sessions DIR... --track gait|task [--config FILE] --seed N
    eval      --checkpoint F --sessions DIR...

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or network
error, 4 data-validation error. ``EQUI_LOG`` sets the log level (a level
name such as ``DEBUG`` or a number; default ``WARNING``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import socket
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from .gait import DetectorConfig
from .fusion import DEFAULT_BETA
from .har import (
    CheckpointError,
    NoAnnotationsError,
    TransformerClassifier,
    concat,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    session_windows,
)
from .har.windows import DEFAULT_DEVICES, MIN_COVERAGE, STRIDE_S, WINDOW_S
from .pipeline import analyze_session, write_outputs
from .protocols import HorseProfile, gait_protocol, task_protocol
from .session import (
    MissingManifestError,
    SampleTable,
    SessionError,
    SessionManifest,
    is_writable_dir,
    read_session,
    save_session,
)
from .sim import ScriptError, load_script, simulate_session
from .wire import Ingestor, table_packets

log = logging.getLogger("equihar")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4

DEFAULT_PORT = 9870
CHECKPOINT_NAME = "model.eqck"
# MAX replay pauses briefly between bursts so loopback receive buffers keep up
REPLAY_BURST = 100
REPLAY_PAUSE_S = 0.001


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _log_level(value: str | None) -> int:
    if not value:
        return logging.WARNING
    if value.strip().lstrip("-").isdigit():
        return int(value)
    level = logging.getLevelName(value.strip().upper())
    if not isinstance(level, int):
        raise CliError(EXIT_USAGE, f"EQUI_LOG={value!r} is not a log level")
    return level


def _out_dir(path) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise CliError(EXIT_IO, f"{path} exists and is not a directory")
    if not is_writable_dir(path):
        raise CliError(EXIT_IO, f"{path} is not writable")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"{what} {path} is not valid JSON: {exc}") from None


def _emit(doc: dict):
    print(json.dumps(doc, indent=2, default=str))


def _read_session(path):
    try:
        return read_session(path)
    except MissingManifestError as exc:
        raise CliError(EXIT_IO, str(exc)) from None


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> int:
    if args.script is not None:
        script = load_script(args.script)
    else:
        profile = HorseProfile.random(args.horse)
        proto = gait_protocol if args.protocol == "gait" else task_protocol
        script = proto(profile, seed=args.horse, repeats=args.repeats)
    out = _out_dir(args.out)
    sim = simulate_session(script.steps, args.seed, gyro_bias=script.gyro_bias or None,
                           session_id=script.session_id)
    save_session(out, sim.manifest(), sim.to_samples(), annotations=sim.truth.labels,
                 truth_events=sim.truth.events)
    kinds: dict[str, int] = {}
    for e in sim.truth.events:
        kinds[e.kind] = kinds.get(e.kind, 0) + 1
    labels: dict[str, list[str]] = {}
    for a in sim.truth.labels:
        labels.setdefault(a.track, [])
        if a.label not in labels[a.track]:
            labels[a.track].append(a.label)
    _emit({"session": str(out), "duration_s": sim.duration, "events": kinds, "labels": labels})
    return EXIT_OK


# ---------------------------------------------------------------- listen/replay


def cmd_listen(args) -> int:
    if args.duration <= 0:
        raise CliError(EXIT_USAGE, "--duration must be positive")
    out = _out_dir(args.out)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 23)
        sock.bind((args.host, args.port))
    except OSError as exc:
        sock.close()
        raise CliError(EXIT_IO, f"cannot bind UDP {args.host}:{args.port}: {exc.strerror}") from None
    log.info("listening on %s:%d for %.1f s", *sock.getsockname()[:2], args.duration)

    ingestor = Ingestor(clock=args.clock)
    samples = []
    wall0 = time.time()
    start = time.monotonic()
    deadline = start + args.duration
    last_rx = None
    try:
        while True:
            now = time.monotonic()
            if now >= deadline or (args.idle_timeout and last_rx is not None and now - last_rx > args.idle_timeout):
                break
            sock.settimeout(min(0.1, deadline - now))
            try:
                data, _ = sock.recvfrom(2048)
            except socket.timeout:
                continue
            last_rx = time.monotonic()
            samples.extend(ingestor.push(last_rx - start, data))
    finally:
        sock.close()
    samples.extend(ingestor.flush())

    table = SampleTable.from_samples(samples)
    if len(table):
        order = np.lexsort((table.t_s, table.device))
        table = SampleTable(table.t_s[order], table.device[order], table.accel[order], table.gyro[order])
    manifest = SessionManifest(args.session_id or out.name, wall0)
    present = set(table.devices())
    for d, rec in manifest.devices.items():
        rec.present = d in present
    save_session(out, manifest, table)
    stats = dataclasses.asdict(ingestor.stats)
    if not len(table):
        log.warning("no packets received in %.1f s; wrote an empty session", args.duration)
    _emit({"session": str(out), "samples": len(table), "devices": sorted(present), **stats})
    return EXIT_OK


def _target(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise CliError(EXIT_USAGE, f"--target must be HOST:PORT, got {value!r}")
    return host, int(port)


def cmd_replay(args) -> int:
    host, port = _target(args.target)
    rate = args.rate.upper()
    if rate not in ("REAL", "MAX"):
        raise CliError(EXIT_USAGE, f"--rate must be REAL or MAX, got {args.rate!r}")
    session = _read_session(args.session)
    try:
        stream = table_packets(session.samples, session.manifest.sample_rate_hz, args.samples_per_packet)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sent = 0
    try:
        t_first = stream[0][0] if stream else 0.0
        start = time.monotonic()
        for i, (t, data) in enumerate(stream):
            if rate == "REAL":
                wait = start + (t - t_first) - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
            elif i and i % REPLAY_BURST == 0:
                time.sleep(REPLAY_PAUSE_S)
            sock.sendto(data, (host, port))
            sent += 1
    except OSError as exc:
        raise CliError(EXIT_IO, f"send to {host}:{port} failed: {exc.strerror}") from None
    finally:
        sock.close()
    _emit({"session": str(args.session), "target": f"{host}:{port}", "packets": sent,
           "samples": len(session.samples)})
    return EXIT_OK


# ------------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    detector = None
    if args.thresholds is not None:
        doc = _read_json(args.thresholds, "thresholds file")
        known = {f.name for f in dataclasses.fields(DetectorConfig)}
        unknown = sorted(set(doc) - known) if isinstance(doc, dict) else ["<not an object>"]
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown threshold keys {unknown}; known: {sorted(known)}")
        detector = DetectorConfig(**doc)
    session = _read_session(args.session)
    out = _out_dir(args.out if args.out is not None else Path(args.session) / "analysis")
    result = analyze_session(session, detector=detector, beta=args.beta)
    paths = write_outputs(result, out)
    for note in result.notes:
        log.warning("%s", note)
    _emit({**result.summary(), "outputs": [str(p) for p in paths]})
    return EXIT_OK


# ---------------------------------------------------------------- train/eval

_WINDOW_KEYS = {"window_s", "stride_s", "downsample_factor", "min_coverage", "devices"}
_MODEL_KEYS = set(TransformerClassifier().get_params()) - {"seed", "classes"}


def _train_config(path) -> tuple[dict, dict]:
    doc = {} if path is None else _read_json(path, "config")
    if not isinstance(doc, dict) or set(doc) - {"model", "windows"}:
        raise CliError(EXIT_USAGE, "config must be an object with optional 'model' and 'windows' sections")
    model, windows = dict(doc.get("model", {})), dict(doc.get("windows", {}))
    for name, sec, known in (("model", model, _MODEL_KEYS), ("windows", windows, _WINDOW_KEYS)):
        bad = sorted(set(sec) - known)
        if bad:
            raise CliError(EXIT_USAGE, f"unknown {name} keys {bad}; known: {sorted(known)}")
    win = {"window_s": WINDOW_S, "stride_s": STRIDE_S, "downsample_factor": 5, "min_coverage": MIN_COVERAGE,
           "devices": list(DEFAULT_DEVICES)}
    win.update(windows)
    return model, win


def _windows(paths, track: str, win: dict):
    parts = []
    for p in paths:
        s = _read_session(p)
        if win["devices"] is not None:
            missing = [d for d in win["devices"] if d not in s.samples.devices()]
            if missing:
                raise CliError(EXIT_DATA, f"{p}: devices {missing} have no samples")
        try:
            ds = session_windows(s.manifest, s.samples, s.annotations, track, **win)
        except NoAnnotationsError as exc:
            raise CliError(EXIT_DATA, f"{p}: {exc}") from None
        log.info("%s: %d windows (%s dropped)", p, len(ds), ds.dropped)
        parts.append(ds)
    data = concat(parts)
    if not len(data):
        raise CliError(EXIT_DATA, "no labelled windows in the given sessions")
    return data


def _write_report(out: Path, report) -> list[Path]:
    paths = [out / "confusion.csv", out / "report.json"]
    report.confusion_frame().to_csv(paths[0])
    with open(paths[1], "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    return paths


def cmd_train(args) -> int:
    model_kw, win = _train_config(args.config)
    if args.epochs is not None:
        model_kw["epochs"] = args.epochs
    clf = TransformerClassifier(**model_kw, seed=args.seed)
    if clf.d_model % clf.n_heads:
        raise CliError(EXIT_USAGE, "d_model must be a multiple of n_heads")
    out = _out_dir(args.out)
    data = _windows(args.sessions, args.track, win)
    clf.fit(data.X, np.array(data.labels))
    ckpt = save_checkpoint(out / CHECKPOINT_NAME, clf, extra={
        "track": args.track, "windows": win, "channels": data.channels,
        "sessions": [str(p) for p in args.sessions]})
    pd.DataFrame({"epoch": np.arange(1, len(clf.loss_curve_) + 1), "loss": clf.loss_curve_}).to_csv(
        out / "loss_curve.csv", index=False)

    eval_data = data if not args.eval_sessions else _windows(args.eval_sessions, args.track, win)
    _check_vocab(eval_data.labels, clf)
    report = evaluate(eval_data.labels, list(clf.predict(eval_data.X)), clf.classes_.tolist())
    _write_report(out, report)
    sys.stdout.write(report.to_text())
    _emit({"checkpoint": str(ckpt), "windows": len(data), "evaluated_on": "eval" if args.eval_sessions else "train",
           "macro_f1": report.macro_f1})
    return EXIT_OK


def _check_vocab(labels, clf):
    extra = sorted(set(labels) - set(clf.classes_.tolist()))
    if extra:
        raise CliError(EXIT_DATA, f"vocabulary mismatch: labels {extra} are not in the checkpoint vocabulary "
                                  f"{clf.classes_.tolist()}")


def cmd_eval(args) -> int:
    try:
        clf, extra = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    track = args.track or extra.get("track")
    if track is None:
        raise CliError(EXIT_USAGE, "checkpoint does not record its track; pass --track")
    win = dict(extra.get("windows", {}))
    data = _windows(args.sessions, track, win)
    if extra.get("channels") and data.channels != extra["channels"]:
        raise CliError(EXIT_DATA, f"channel mismatch: checkpoint expects {extra['channels']}, got {data.channels}")
    _check_vocab(data.labels, clf)
    report = evaluate(data.labels, list(clf.predict(data.X)), clf.classes_.tolist())
    if args.out is not None:
        _write_report(_out_dir(args.out), report)
    sys.stdout.write(report.to_text())
    _emit({"windows": len(data), "macro_f1": report.macro_f1, "worst_class": report.worst_class()})
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="equihar", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic session with ground truth")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--script", type=Path, help="JSON script: list of steps or {'steps': [...]}")
    src.add_argument("--protocol", choices=("gait", "task"), help="built-in protocol for one random horse")
    p.add_argument("--horse", type=int, default=1, help="horse seed for --protocol")
    p.add_argument("--repeats", type=int, default=4, help="blocks per class for --protocol")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("listen", help="record UDP sensor packets into a session")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--duration", type=float, required=True, help="capture length [s]")
    p.add_argument("--idle-timeout", type=float, default=None,
                   help="stop early once no packet arrived for this long [s]")
    p.add_argument("--clock", choices=("host", "device"), default="host",
                   help="timestamp source: host arrival mapping or the shared device clock")
    p.add_argument("--session-id", default=None)
    p.set_defaults(func=cmd_listen)

    p = sub.add_parser("replay", help="send a recorded session as UDP packets")
    p.add_argument("--session", type=Path, required=True)
    p.add_argument("--target", required=True, help="HOST:PORT")
    p.add_argument("--rate", default="REAL", help="REAL (original timing) or MAX")
    p.add_argument("--samples-per-packet", type=int, default=4)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("analyze", help="hoof events, timing, rider MMI and activity map")
    p.add_argument("--session", type=Path, required=True)
    p.add_argument("--thresholds", type=Path, help="JSON object of detector settings")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--out", type=Path, help="default: <session>/analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a window classifier")
    p.add_argument("--sessions", type=Path, nargs="+", required=True)
    p.add_argument("--track", choices=("gait", "task"), required=True)
    p.add_argument("--config", type=Path, help="JSON with optional 'model' and 'windows' sections")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-sessions", type=Path, nargs="+", default=None,
                   help="held-out sessions for the report (default: the training sessions)")
    p.add_argument("--out", type=Path, default=Path("model"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on annotated sessions")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sessions", type=Path, nargs="+", required=True)
    p.add_argument("--track", choices=("gait", "task"), default=None, help="default: the checkpoint's track")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    try:
        level = _log_level(os.environ.get("EQUI_LOG"))
    except CliError as exc:
        print(f"equihar: {exc}", file=sys.stderr)
        return exc.code
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ScriptError as exc:
        code, msg = EXIT_USAGE, f"invalid script: {exc}"
    except (SessionError, CheckpointError, NoAnnotationsError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except OSError as exc:
        code, msg = EXIT_IO, f"{exc.filename or ''}: {exc.strerror or exc}"
    except ValueError as exc:
        code, msg = EXIT_DATA, str(exc)
    print(f"equihar: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
