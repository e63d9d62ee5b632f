"""``csifb`` command line: generate, train, eval, simulate, gradcheck.

Settings are layered file < environment < flags. The config file is JSON with
optional ``scenario``, ``train``, ``recovery`` and ``run`` sections; the
environment supplies ``CSIFB_SEED``, ``CSIFB_OUT`` and ``CSIFB_THREADS``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checks, protocol
from .baselines import RecoveryConfig
from .channel import CoherenceError, Dataset, ScenarioConfig, generate_dataset
from .experiment import (BASELINES, baseline_results, dl_frame_runtime, eval_csinet,
                         eval_csinet_lstm)
from .metrics import make_report, runtime_benchmark, report_json, report_table, report_text, with_degradation
from .models import (CsiNetLstmParams, CsiNetParams, DimensionError, codeword_len,
                     csinet_lstm_forward, load_params, save_params)
from .training import TrainConfig, TrainingError, config_dict, train_csinet, train_csinet_lstm

log = logging.getLogger("csifb")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_ECHO = "config.json"
DATASET_FILE = "dataset.csifb"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    counts: tuple[int, int, int] = (2000, 400, 400)
    cr: tuple[float, ...] = (1 / 16, 1 / 32, 1 / 64)
    cr_high: float = 1 / 4
    seed: int = 0
    out: str = "out"
    threads: int | None = None
    model: str = "csinet"
    baselines: tuple[str, ...] = ()
    dataset: str | None = None
    checkpoint: tuple[str, ...] = ()
    preload: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))


def parse_cr(text) -> tuple[float, ...]:
    """``"1/16,1/32"`` or a list of numbers to a tuple of floats."""
    items = text.split(",") if isinstance(text, str) else list(text)
    out = []
    for it in items:
        try:
            v = float(Fraction(str(it).strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"bad compression ratio {it!r}") from e
        if not 0 < v <= 1:
            raise ConfigError(f"compression ratio {it!r} outside (0, 1]")
        out.append(v)
    return tuple(out)


def _split(text) -> tuple[str, ...]:
    if text is None:
        return ()
    items = text.split(",") if isinstance(text, str) else text
    return tuple(s.strip() for s in items if str(s).strip())


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    bad = set(data) - known
    if bad:
        raise ConfigError(f"unknown {name} keys: {', '.join(sorted(bad))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """Merge file, environment and flags, in rising precedence."""
    environ = os.environ if environ is None else environ
    raw = load_config_file(args.config) if getattr(args, "config", None) else {}
    run = dict(raw.get("run", {}))
    extra = set(raw) - {"scenario", "train", "recovery", "run"}
    if extra:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(extra))}")

    for key, env, conv in (("seed", "CSIFB_SEED", int), ("out", "CSIFB_OUT", str),
                           ("threads", "CSIFB_THREADS", int)):
        if env in environ:
            try:
                run[key] = conv(environ[env])
            except ValueError as e:
                raise ConfigError(f"{env}={environ[env]!r}: {e}") from e

    for key in ("seed", "out", "model", "dataset"):
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    for key in ("cr", "baselines", "checkpoint", "preload"):
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val

    cfg = RunConfig()
    scen = dict(raw.get("scenario", {}))
    train = dict(raw.get("train", {}))
    if "seed" in run:
        scen["seed"] = train["seed"] = run["seed"]
    cfg.scenario = _section(ScenarioConfig, scen, "scenario")
    cfg.train = _section(TrainConfig, train, "train")
    cfg.recovery = _section(RecoveryConfig, raw.get("recovery", {}), "recovery")
    cfg.seed = cfg.scenario.seed
    if "counts" in run:
        c = tuple(int(x) for x in run["counts"])
        if len(c) != 3 or min(c) < 1:
            raise ConfigError("counts must be three positive integers (train, val, test)")
        cfg.counts = c
    if "cr" in run:
        cfg.cr = parse_cr(run["cr"])
    if "cr_high" in run:
        (cfg.cr_high,) = parse_cr([run["cr_high"]])
    for key in ("out", "model", "dataset"):
        if key in run:
            setattr(cfg, key, run[key])
    if "threads" in run:
        cfg.threads = int(run["threads"])
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
    cfg.baselines = _split(run.get("baselines"))
    cfg.checkpoint = _split(run.get("checkpoint"))
    cfg.preload = _split(run.get("preload"))
    unknown = set(cfg.baselines) - set(BASELINES)
    if unknown:
        raise ConfigError(f"unknown baselines: {', '.join(sorted(unknown))}")
    if cfg.model not in ("csinet", "csinet-lstm"):
        raise ConfigError(f"unknown model {cfg.model!r}")
    for cr in cfg.cr + (cfg.cr_high,):
        try:
            codeword_len(cfg.scenario.n_real, cr)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return cfg


def echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = Path(cfg.dataset) if cfg.dataset else Path(cfg.out) / DATASET_FILE
    if not path.exists():
        raise DataError(f"dataset {path} not found; run `csifb generate` first")
    try:
        return Dataset.load(path)
    except (ValueError, KeyError) as e:
        raise DataError(f"dataset {path}: {e}") from e


def _load_ckpt(path):
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        return load_params(path)
    except (ValueError, KeyError) as e:
        raise DataError(f"checkpoint {path}: {e}") from e


def _check_dims(p, ds: Dataset, path) -> None:
    want = (ds.config.n_delay, ds.config.n_antennas)
    have = (p.n_delay, p.n_antennas)
    if want != have:
        raise DimensionError(f"checkpoint {path} is for {have[0]}x{have[1]} frames, "
                             f"dataset has {want[0]}x{want[1]}")


# --- subcommands ---------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    echo_config(cfg, out)
    ds = generate_dataset(cfg.scenario, cfg.counts)
    ds.save(out / DATASET_FILE)
    print(f"wrote {out / DATASET_FILE}: counts {ds.counts()}, "
          f"N_c={cfg.scenario.n_subcarriers} N_t={cfg.scenario.n_antennas} "
          f"N_c'={cfg.scenario.n_delay} T={cfg.scenario.group_len}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    ds = _load_dataset(cfg)
    echo_config(cfg, out)
    tr, va = ds.normalized("train"), ds.normalized("val")
    n_real = ds.config.n_real
    tcfg = replace(cfg.train, checkpoint_dir=cfg.train.checkpoint_dir or str(out))
    if len(cfg.cr) != 1:
        raise ConfigError("train takes exactly one --cr")
    cr = cfg.cr[0]
    m = codeword_len(n_real, cr)
    if cfg.model == "csinet":
        params, hist = train_csinet(tr, va, m, tcfg)
        name = f"csinet-cr{m}"
    else:
        m_high = codeword_len(n_real, cfg.cr_high)
        preload = None
        if cfg.preload:
            if len(cfg.preload) != 2:
                raise ConfigError("--preload takes two checkpoints: HIGH,LOW")
            preload = tuple(_load_ckpt(p) for p in cfg.preload)
            if not all(isinstance(p, CsiNetParams) for p in preload):
                raise ConfigError("--preload checkpoints must be standalone csinet models")
        params, hist = train_csinet_lstm(tr, va, m_high, m, tcfg, preload)
        name = f"csinet-lstm-cr{m_high}-{m}"
    ckpt = out / f"{name}.ckpt"
    save_params(params, ckpt, {"config": config_dict(tcfg), "cr": cr, "cr_high": cfg.cr_high,
                               "val_loss": hist.val_loss[-1] if len(hist) else None})
    hist.checkpoint = str(ckpt)
    hist.save(out / f"{name}.history.jsonl")
    print(f"wrote {ckpt} ({len(hist)} epochs, final val loss {hist.val_loss[-1]:.6g})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    ds = _load_dataset(cfg)
    echo_config(cfg, out)
    results = []
    for path in cfg.checkpoint:
        p = _load_ckpt(path)
        _check_dims(p, ds, path)
        frames = ds.normalized("test")[:20]
        if isinstance(p, CsiNetLstmParams):
            r = eval_csinet_lstm(p, ds, p.low.codeword_len / p.n_real)
            r.runtime_s = runtime_benchmark(lambda g: csinet_lstm_forward(g, p), frames) / frames.shape[1]
        else:
            r = eval_csinet(p, ds, p.codeword_len / p.n_real)
            r.runtime_s = dl_frame_runtime(p, frames[:, 0])
        results.append(r)
    results += baseline_results(ds, cfg.cr, cfg.baselines, seed=cfg.seed)
    results = with_degradation(results)
    report = make_report(results, {"seed": cfg.seed, "checkpoints": list(cfg.checkpoint)})
    (out / "report.json").write_text(report_json(report))
    (out / "report.tsv").write_text(report_table(results))
    print(report_text(results), end="")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, n_groups: int | None, capture: str | None,
                 replay: str | None) -> int:
    out = Path(cfg.out)
    ds = _load_dataset(cfg)
    if len(cfg.checkpoint) != 1:
        raise ConfigError("simulate takes exactly one --checkpoint (a csinet-lstm model)")
    p = _load_ckpt(cfg.checkpoint[0])
    if not isinstance(p, CsiNetLstmParams):
        raise ConfigError("simulate needs a csinet-lstm checkpoint")
    _check_dims(p, ds, cfg.checkpoint[0])
    echo_config(cfg, out)
    groups = ds.normalized("test")[:n_groups]
    rep = protocol.simulate_session(groups, p, None, ds.config.feedback_interval_s, ds.stats,
                                    ds.config.n_subcarriers)
    offline = np.stack([csinet_lstm_forward(g, p, wire_dtype=np.float32) for g in groups]) \
        if len(groups) else rep.recon
    max_diff = float(np.max(np.abs(offline - rep.recon))) if len(groups) else 0.0
    summary = {
        "groups": int(len(groups)),
        "payload_bytes_per_group": rep.payload_bytes_per_group,
        "total_bytes_per_group": rep.total_bytes_per_group,
        "overhead_bytes_per_frame": protocol.OVERHEAD_BYTES,
        "bs_step_s_max": rep.bs_step_s_max,
        "bs_step_s_median": rep.bs_step_s_median,
        "realtime_ok": rep.realtime_ok,
        "offline_max_abs_diff": max_diff,
        "nmse_db_mean": float(np.mean([r.nmse_db for r in rep.results])) if rep.results else None,
        "rho_mean": float(np.mean([r.rho for r in rep.results])) if rep.results else None,
    }
    if capture:
        Path(capture).write_bytes(protocol.write_capture(rep.wire))
        summary["capture"] = capture
    if replay:
        wire = protocol.read_capture(Path(replay).read_bytes())
        rec = protocol.replay(wire, p, ds.config.group_len)
        flat = rep.recon.reshape((-1,) + rep.recon.shape[2:])
        summary["replay_max_abs_diff"] = (float(np.max(np.abs(rec - flat), initial=0.0))
                                          if rec.shape == flat.shape else None)
    (out / "simulate.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK if rep.realtime_ok else EXIT_NUMERIC


def cmd_gradcheck(seed: int, break_op: str | None, paper_shapes: bool) -> int:
    rows = checks.gradcheck_suite(seed=seed, break_op=break_op)
    print(checks.gradcheck_table(rows), end="")
    code = EXIT_OK if all(r.ok for r in rows) else EXIT_NUMERIC
    if paper_shapes:
        code = max(code, cmd_paper_shapes())
    return code


def cmd_paper_shapes() -> int:
    r = checks.paper_scale_shapes()
    print(f"paper-scale shapes: M_high={r.m_high} M_low={r.m_low} "
          f"low decoder input={r.low_decoder_input} outputs={len(r.output_shapes)}x"
          f"{r.output_shapes[0]} parameters={r.n_parameters} ({r.seconds:.1f} s)")
    ok = (r.m_high, r.m_low, r.low_decoder_input) == (512, 128, 640) and \
        r.output_shapes == [(2, 32, 32)] * 10
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--cr", help="compression ratios, e.g. 1/16,1/32")
    common.add_argument("--dataset", help="dataset file (default OUT/dataset.csifb)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="csifb", description=__doc__.splitlines()[0])
    ap.add_argument("--paper-scale-shapes", action="store_true",
                    help="run the untrained paper-scale forward-shape check and exit")
    sub = ap.add_subparsers(dest="command")
    sub.add_parser("generate", parents=[common], help="generate a dataset")
    t = sub.add_parser("train", parents=[common], help="train csinet or csinet-lstm")
    t.add_argument("--model", choices=("csinet", "csinet-lstm"))
    t.add_argument("--preload", help="HIGH,LOW standalone csinet checkpoints")
    e = sub.add_parser("eval", parents=[common], help="score checkpoints and baselines")
    e.add_argument("--checkpoint", help="comma-separated checkpoints")
    e.add_argument("--baselines", help="comma-separated: " + ",".join(BASELINES))
    s = sub.add_parser("simulate", parents=[common], help="run the feedback protocol")
    s.add_argument("--checkpoint", help="csinet-lstm checkpoint")
    s.add_argument("--groups", type=int, help="number of test groups")
    s.add_argument("--capture", help="write the wire capture here")
    s.add_argument("--replay", help="replay a wire capture and compare")
    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--break-op", choices=checks.BREAKABLE,
                   help="deliberately corrupt one op's backward pass (harness self-test)")
    g.add_argument("--paper-scale-shapes", action="store_true", dest="paper_shapes")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command is None:
            if args.paper_scale_shapes:
                return cmd_paper_shapes()
            ap.print_help()
            return EXIT_CONFIG
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.break_op, args.paper_shapes)
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            if args.command == "generate":
                return cmd_generate(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg)
            return cmd_simulate(cfg, args.groups, args.capture, args.replay)
    except (ConfigError, CoherenceError) as e:
        print(f"csifb: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError) as e:
        print(f"csifb: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"csifb: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
