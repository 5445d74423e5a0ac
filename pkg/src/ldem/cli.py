"""Command-line entry points: ``train``, ``enhance``, ``eval`` and ``bench``.

Exit codes: 0 on success, 2 for usage, configuration or checkpoint errors,
3 for numerical failures (divergence, non-finite state).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import struct
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import (
    AudioError,
    CorpusSpec,
    Waveform,
    colored_noise,
    load_wav_dir,
    mix_at_snr,
    read_wav,
    stft,
    synth_corpus,
    white_noise,
    write_wav,
)
from .enhance import enhance_file, si_sdr, stoi
from .nn import DenseLayer, DivergenceError, ShapeError
from .posterior import EmConfig
from .samplers import DEFAULT_BENCH, METHODS, MethodSpec, bench
from .vae import LAYER_SHAPES, EpochRecord, TrainConfig, VaeParams, train_vae

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Checkpoint: "VAESP1", u32 version, u32 record count, records, u32 CRC32.
# A record is u32 name length, UTF-8 name, u32 rows, u32 cols, then
# rows*cols little-endian float64 in row-major order.  Biases are stored as
# (n, 1) records named "<layer>.bias".
# ---------------------------------------------------------------------------

MAGIC = b"VAESP1"
FORMAT_VERSION = 1


def _records(vae: VaeParams):
    for name, layer in vae.named_layers():
        yield f"{name}.weight", layer.weight
        yield f"{name}.bias", layer.bias.reshape(-1, 1)


def checkpoint_bytes(vae: VaeParams) -> bytes:
    records = list(_records(vae))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        rows, cols = arr.shape
        buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, vae: VaeParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(vae))


def parse_checkpoint(data: bytes) -> VaeParams:
    if len(data) < len(MAGIC) + 12 or not data.startswith(MAGIC):
        raise CheckpointError("not a VAESP1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file corrupted)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arrays[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(body):
        raise CheckpointError("trailing bytes after last record")

    layers = {}
    for name, (out_dim, in_dim) in LAYER_SHAPES.items():
        try:
            w, b = arrays.pop(f"{name}.weight"), arrays.pop(f"{name}.bias")
        except KeyError:
            raise CheckpointError(f"checkpoint lacks layer {name!r}") from None
        if w.shape != (out_dim, in_dim) or b.shape != (out_dim, 1):
            raise CheckpointError(
                f"{name}: shape {w.shape}/{b.shape} does not match the architecture "
                f"({out_dim}, {in_dim})"
            )
        layers[name] = DenseLayer(w, b[:, 0].copy())
    if arrays:
        raise CheckpointError(f"unexpected records {sorted(arrays)}")
    try:
        return VaeParams(**layers)
    except (ShapeError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None


def load_checkpoint(path) -> VaeParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return parse_checkpoint(data)


# ---------------------------------------------------------------------------
# Run configuration: flat ``key = value`` lines, '#' comments.
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    em: EmConfig
    train: TrainConfig
    corpus_dir: Optional[str] = None
    n_utterances: int = 200
    duration_s: float = 2.0
    corpus_seed: int = 1
    eval_dir: Optional[str] = None
    eval_utterances: int = 20
    eval_seed: int = 999
    snr_list: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    noise_type: str = "white"
    methods: tuple = ("ldem",)
    checkpoint: Optional[str] = None
    output: Optional[str] = None
    bench_duration_s: float = 5.0


_EM_KEYS = {f.name: f for f in fields(EmConfig)}
_EM_KEYS["lambda"] = _EM_KEYS.pop("lam")
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig) if f.name != "seed"}
_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name not in ("em", "train")}


def _convert(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean for {key!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if key == "snr_list":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if key == "methods":
        specs = tuple(raw.split())
        for s in specs:
            MethodSpec.parse(s)
        return specs
    if key == "noise_type" and raw not in ("white", "colored"):
        raise ValueError("noise_type must be 'white' or 'colored'")
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a run configuration; every bad line raises with its line number."""
    em, tr, run = {}, {}, {}
    defaults_em, defaults_tr, defaults_run = EmConfig(), TrainConfig(), RunConfig(EmConfig(), TrainConfig())
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (s.strip() for s in line.partition("="))
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        if not raw:
            raise ConfigError(f"{where}: missing value for key {key!r}")
        try:
            if key == "seed":
                em["seed"] = tr["seed"] = int(raw)
            elif key in _EM_KEYS:
                name = "lam" if key == "lambda" else key
                em[name] = _convert(raw, getattr(defaults_em, name), key)
            elif key in _TRAIN_KEYS:
                tr[key] = _convert(raw, getattr(defaults_tr, key), key)
            elif key in _RUN_KEYS:
                default = getattr(defaults_run, key)
                run[key] = _convert(raw, default if default is not None else "", key)
            else:
                raise ConfigError(f"{where}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value {raw!r} for key {key!r}: {exc}") from None
    try:
        return RunConfig(em=EmConfig(**em), train=TrainConfig(**tr), **run)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig(EmConfig(), TrainConfig())
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, str(path))


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    em = cfg.em
    if getattr(args, "seed", None) is not None:
        em = replace(em, seed=args.seed)
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "lam", None) is not None:
        em = replace(em, lam=args.lam)
    if getattr(args, "chains", None) is not None:
        em = replace(em, m=args.chains)
    if getattr(args, "verbose", False):
        em = replace(em, verbose=True)
    return replace(cfg, em=em)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _training_corpus(cfg: RunConfig):
    if cfg.corpus_dir:
        waves = load_wav_dir(cfg.corpus_dir)
    else:
        waves = synth_corpus(CorpusSpec(cfg.n_utterances, cfg.duration_s, cfg.corpus_seed))
    if not waves:
        raise ConfigError("training corpus is empty")
    return [stft(w) for w in waves]


def cmd_train(args, cfg: RunConfig, out=sys.stdout) -> int:
    target = args.out or cfg.checkpoint
    if not target:
        raise ConfigError("no checkpoint path: pass --out or set 'checkpoint'")
    corpus = _training_corpus(cfg)

    def report(r: EpochRecord):
        print(f"epoch {r.epoch:4d}  train {r.train_loss:.4f}  val {r.val_loss:.4f}", file=out)

    vae = train_vae(corpus, cfg.train, on_epoch=report)
    save_checkpoint(target, vae)
    print(f"wrote {target}", file=out)
    return EXIT_OK


def _method(text: str) -> MethodSpec:
    try:
        return MethodSpec.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_enhance(args, cfg: RunConfig, out=sys.stdout) -> int:
    vae = load_checkpoint(args.checkpoint)
    spec = _method(args.method or cfg.methods[0])
    noisy = read_wav(args.noisy)
    res = enhance_file(noisy, vae, spec.config(cfg.em), spec.name, sink=sys.stderr)
    write_wav(args.output, res.enhanced)
    print(f"wrote {args.output} ({len(res.enhanced)} samples, {spec.label})", file=out)
    return EXIT_OK


REPORT_COLUMNS = (
    "utterance", "method", "lambda", "m", "snr",
    "si_sdr_in", "si_sdr_out", "stoi_in", "stoi_out", "wall_time_s",
)


def _eval_corpus(cfg: RunConfig):
    if cfg.eval_dir:
        paths = sorted(Path(cfg.eval_dir).glob("*.wav"))
        waves = [read_wav(p) for p in paths]
        ids = [p.stem for p in paths]
    else:
        waves = synth_corpus(CorpusSpec(cfg.eval_utterances, cfg.duration_s, cfg.eval_seed))
        ids = [f"synth_{i:03d}" for i in range(len(waves))]
    if not waves:
        raise ConfigError("evaluation corpus is empty")
    return list(zip(ids, waves))


def _noise_for(cfg: RunConfig, n: int, u: int, k: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.em.seed, u, k])
    return colored_noise(n, rng) if cfg.noise_type == "colored" else white_noise(n, rng)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _eval_one(job, vae, cfg: RunConfig, specs):
    u, (uid, clean), k, snr = job
    noisy = mix_at_snr(clean, _noise_for(cfg, len(clean), u, k), snr)
    sdr_in, stoi_in = si_sdr(clean, noisy), stoi(clean, noisy)
    rows = [dict(utterance=uid, method="input", snr=snr, si_sdr_in=sdr_in, si_sdr_out=sdr_in,
                 stoi_in=stoi_in, stoi_out=stoi_in, wall_time_s=0.0)]
    for spec in specs:
        run_cfg = replace(spec.config(cfg.em), verbose=False)
        t0 = time.perf_counter()
        res = enhance_file(noisy, vae, run_cfg, spec.name)
        elapsed = time.perf_counter() - t0
        rows.append(dict(
            utterance=uid, method=spec.label, **{"lambda": run_cfg.lam}, m=run_cfg.m, snr=snr,
            si_sdr_in=sdr_in, si_sdr_out=si_sdr(clean, res.enhanced),
            stoi_in=stoi_in, stoi_out=stoi(clean, res.enhanced), wall_time_s=elapsed,
        ))
    return rows


def _workers() -> int:
    raw = os.environ.get("LDEM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"LDEM_THREADS must be an integer, got {raw!r}") from None


def run_eval(vae: VaeParams, cfg: RunConfig, specs) -> list[dict]:
    """Evaluate every (utterance, snr) pair; rows sorted by (utterance, method, snr)."""
    corpus = _eval_corpus(cfg)
    jobs = [(u, item, k, snr) for u, item in enumerate(corpus) for k, snr in enumerate(cfg.snr_list)]
    n_workers = min(_workers(), len(jobs))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(lambda j: _eval_one(j, vae, cfg, specs), jobs))
    else:
        parts = [_eval_one(j, vae, cfg, specs) for j in jobs]
    rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: (r["utterance"], r["method"], r["snr"]))
    return rows


def write_report(rows, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([
            r["utterance"], r["method"], _fmt(r.get("lambda")),
            "" if r.get("m") is None else str(r["m"]), _fmt(r["snr"]),
            _fmt(r["si_sdr_in"]), _fmt(r["si_sdr_out"]), _fmt(r["stoi_in"]),
            _fmt(r["stoi_out"]), f"{r['wall_time_s']:.3f}",
        ])


def cmd_eval(args, cfg: RunConfig, out=sys.stdout) -> int:
    vae = load_checkpoint(args.checkpoint)
    specs = [_method(m) for m in (args.method or cfg.methods)]
    rows = run_eval(vae, cfg, specs)
    target = args.out or cfg.output
    if target:
        with open(target, "w", newline="") as fh:
            write_report(rows, fh)
        print(f"wrote {len(rows)} rows to {target}", file=out)
    else:
        write_report(rows, out)
    return EXIT_OK


def _bench_table(rows) -> str:
    head = ("method", "frames", "wall_time_s", "si_sdr", "stoi", "tv")
    cells = [head] + [
        tuple("-" if r[k] is None else (f"{r[k]:.3f}" if isinstance(r[k], float) else str(r[k]))
              for k in head)
        for r in rows
    ]
    widths = [max(len(c[i]) for c in cells) for i in range(len(head))]
    return "\n".join("  ".join(c[i].rjust(widths[i]) for i in range(len(head))) for c in cells)


def cmd_bench(args, cfg: RunConfig, out=sys.stdout) -> int:
    vae = load_checkpoint(args.checkpoint)
    clean: Optional[Waveform] = None
    if args.utterance:
        noisy = read_wav(args.utterance)
    else:
        clean = synth_corpus(CorpusSpec(1, cfg.bench_duration_s, cfg.eval_seed))[0]
        noisy = mix_at_snr(clean, _noise_for(cfg, len(clean), 0, 0), 0.0)
    specs = [_method(m) for m in args.method] if args.method else list(DEFAULT_BENCH)
    rows = bench(stft(noisy), vae, replace(cfg.em, verbose=False), specs,
                 clean=clean, out_len=len(noisy))
    rows = [{k: (float(v) if isinstance(v, np.floating) else v) for k, v in r.items()} for r in rows]
    if args.json:
        print(json.dumps(rows, indent=2), file=out)
    else:
        print(_bench_table(rows), file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lam", type=float, help="TV weight")
    common.add_argument("--chains", type=int, help="chains per frame (m)")
    common.add_argument("--verbose", action="store_true", help="stream E-step diagnostics to stderr")

    parser = argparse.ArgumentParser(prog="ldem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the VAE speech prior")
    p.add_argument("--out", help="checkpoint path (overrides 'checkpoint')")

    p = sub.add_parser("enhance", parents=[common], help="enhance one noisy wav file")
    p.add_argument("checkpoint")
    p.add_argument("noisy")
    p.add_argument("output")
    p.add_argument("--method", help=f"one of {{{', '.join(METHODS)}}}, optionally name:key=value,...")

    p = sub.add_parser("eval", parents=[common], help="SNR sweep report (CSV)")
    p.add_argument("checkpoint")
    p.add_argument("--method", action="append", help="solver spec; repeat for several")
    p.add_argument("--out", help="report path (default: stdout)")

    p = sub.add_parser("bench", parents=[common], help="runtime / quality table")
    p.add_argument("checkpoint")
    p.add_argument("utterance", nargs="?", help="noisy wav (default: 5 s synthetic mixture)")
    p.add_argument("--method", action="append", help="solver spec; repeat for several")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


COMMANDS = {"train": cmd_train, "enhance": cmd_enhance, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, CheckpointError, AudioError, ShapeError) as exc:
        print(f"ldem {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"ldem {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ldem {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
