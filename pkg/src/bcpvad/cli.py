"""``bcpvad`` command-line entry point.

Every option can also come from a TOML config file (``--config``): top-level
keys apply to all commands, a ``[<command>]`` table to one command, and flags
given on the command line win over both.  Each run writes the resolved
configuration as ``<command>_config.json`` beside its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import audio, corpus, dsp, evaluation, net, pipeline, power, quant, training
from .power import tomllib

log = logging.getLogger("bcpvad")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FILE = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"not a comma-separated number list: {text!r}", EXIT_CONFIG) from exc


def _threshold_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return _floats(text)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

# option name -> default; ``None`` means required unless the config file has it
DEFAULTS = {
    "synth": {"out": None, "seed": 0, "train_hours": 0.5, "test_hours": 0.1,
              "n_speakers": 20, "n_test_speakers": 4, "clip_len_s": 30.0,
              "bc_attenuation_db": corpus.DEFAULT_BC_ATTENUATION_DB},
    "features": {"manifest": None, "out": None, "split": "train", "channel": "bc"},
    "train": {"manifest": None, "out": None, "channel": "bc", "seed": 0, "model_seed": 0,
              "lr": 1e-3, "batch_size": 8, "steps_per_epoch": 2000, "max_epochs": 100,
              "bptt_len": 300, "lr_halve_patience": 3, "early_stop_patience": 5},
    "quantize": {"model": None, "manifest": None, "out": None, "channel": "bc", "bits": 8,
                 "percentile": 0.1, "calib_clips": 10, "evaluate": True},
    "infer": {"model": None, "wav": None, "out": None, "gate": False, "threshold_db": -60.0,
              "hangover": 0, "skip_output": "0.0", "policy": "hold", "profile": "apollo4"},
    "eval": {"bc_model": None, "ac_model": None, "manifest": None, "out": None,
             "mode": "equal-env", "snr_grid": "-10,0,10,20"},
    "gate-sweep": {"model": None, "manifest": None, "out": None,
                   "thresholds": "-60,-50,-40,-35,-30,-25,-20,-15", "hangover": 0,
                   "skip_output": "0.0", "policy": "hold", "snr_db": pipeline.SWEEP_SNR_DB},
    "power": {"profile": "apollo4,nrf5340", "skip": "0,0.2,0.4", "out": None},
}


def load_config_file(path) -> dict:
    try:
        return tomllib.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}", EXIT_FILE) from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from exc


def resolve(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    file_cfg = load_config_file(args.config) if args.config else {}
    merged = dict(defaults)
    for k, v in file_cfg.items():
        if not isinstance(v, dict):
            key = k.replace("-", "_")
            if key in defaults:
                merged[key] = v
    for k, v in file_cfg.get(command, {}).items():
        key = k.replace("-", "_")
        if key not in defaults:
            raise CliError(f"unknown key {k!r} in [{command}] of {args.config}", EXIT_CONFIG)
        merged[key] = v
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    missing = [k for k, v in merged.items() if v is None and k != "out"]
    if missing:
        raise CliError(f"{command}: missing required option(s): "
                       + ", ".join("--" + k.replace("_", "-") for k in missing), EXIT_CONFIG)
    return merged


def write_snapshot(command: str, cfg: dict, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command.replace('-', '_')}_config.json"
    snap = {"command": command, **{k: (str(v) if isinstance(v, Path) else v)
                                   for k, v in cfg.items()}}
    path.write_text(json.dumps(snap, indent=2, sort_keys=True))
    return path


def _out_dir(cfg: dict, fallback: str = ".") -> Path:
    return Path(cfg["out"] if cfg.get("out") else fallback)


def _skip_output(v):
    if v is None or str(v).lower() in ("hold", "none", "last"):
        return None
    return float(v)


def load_model(path):
    """Float or quantized model, picked from the file header."""
    p = Path(path).with_suffix(".json")
    if not p.exists():
        raise CliError(f"model file not found: {p}", EXIT_FILE)
    try:
        kind = json.loads(p.read_text()).get("kind")
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: {exc}", EXIT_FORMAT) from exc
    if kind == "quantized":
        return quant.load_qparams(p)
    return net.load_params(p)


def _manifest(path):
    p = Path(path)
    if not (p / "manifest.json").exists() and not p.is_file():
        raise CliError(f"manifest not found: {path}", EXIT_FILE)
    return corpus.load_manifest(p)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    if not cfg.get("out"):
        raise CliError("synth: missing required option --out", EXIT_CONFIG)
    out = _out_dir(cfg)
    try:
        spec = corpus.SynthSpec(seed=int(cfg["seed"]), n_speakers=int(cfg["n_speakers"]),
                                n_test_speakers=int(cfg["n_test_speakers"]),
                                clip_len_s=float(cfg["clip_len_s"]),
                                bc_external_attenuation_db=float(cfg["bc_attenuation_db"]),
                                train_hours=float(cfg["train_hours"]),
                                test_hours=float(cfg["test_hours"]))
    except ValueError as exc:
        raise CliError(f"synth: {exc}", EXIT_CONFIG) from exc
    write_snapshot("synth", cfg, out)
    manifest = corpus.build_dataset(spec, out)
    for split in ("train", "test"):
        n = len(corpus.split_entries(manifest, split))
        rep = manifest["active_frames"][split]
        print(f"{split}: {n} clips; active-frame bins low {rep['low_lt_25']:.2f} "
              f"medium {rep['medium_25_60']:.2f} high {rep['high_gt_60']:.2f}; "
              f"mean active {rep['mean_active_fraction']:.2f}")
    print(f"manifest sha256 {corpus.manifest_digest(manifest)}")
    return EXIT_OK


def write_features_csv(path, values, energy_db) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_index", "energy_db"] + [f"mel{i}" for i in range(values.shape[1])])
        for k, (e, row) in enumerate(zip(energy_db, values)):
            w.writerow([k, f"{e:.6f}", *(f"{v:.6f}" for v in row)])


def cmd_features(cfg: dict) -> int:
    m = _manifest(cfg["manifest"])
    split, ch = cfg["split"], cfg["channel"]
    if split not in ("train", "test") or ch not in ("bc", "ac"):
        raise CliError(f"features: bad split/channel {split!r}/{ch!r}", EXIT_CONFIG)
    out = _out_dir(cfg, f"features_{split}_{ch}")
    write_snapshot("features", cfg, out)
    fb = dsp.build_mel_filterbank()
    entries = corpus.split_entries(m, split)
    for e in entries:
        clip = corpus.load_clip(m, e, stems=(f"y_{ch}",))
        values, energy = dsp.extract_clip_features(getattr(clip, f"y_{ch}"), fb)
        write_features_csv(out / f"{e['id']}_{ch}.csv", values, energy)
    print(f"wrote features of {len(entries)} clips to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    m = _manifest(cfg["manifest"])
    ch = cfg["channel"]
    try:
        tcfg = training.TrainConfig(
            lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
            steps_per_epoch=int(cfg["steps_per_epoch"]), max_epochs=int(cfg["max_epochs"]),
            lr_halve_patience=int(cfg["lr_halve_patience"]),
            early_stop_patience=int(cfg["early_stop_patience"]),
            bptt_len=int(cfg["bptt_len"]), seed=int(cfg["seed"]))
        tr = training.load_features(m, "train", ch)
        te = training.load_features(m, "test", ch)
    except training.ConfigurationError as exc:
        raise CliError(f"train: {exc}", EXIT_CONFIG) from exc
    out = _out_dir(cfg)
    write_snapshot("train", cfg, out)

    def progress(e):
        print(f"epoch {e.epoch}: train {e.train_loss:.4f} test {e.test_loss:.4f} lr {e.lr:.2e}")

    params, history = training.train(tr, te, tcfg, model_seed=int(cfg["model_seed"]),
                                     progress=progress)
    model_path = net.save_params(params, out / f"model_{ch}",
                                 extra={"channel": ch, "best_test_loss":
                                        min(h.test_loss for h in history)})
    training.write_log_csv(history, out / f"train_log_{ch}.csv")
    print(f"wrote {model_path} ({net.param_count(params)} parameters)")
    return EXIT_OK


def cmd_quantize(cfg: dict) -> int:
    params = load_model(cfg["model"])
    if not isinstance(params, net.NetParams):
        raise CliError("quantize needs a float model", EXIT_FORMAT)
    m = _manifest(cfg["manifest"])
    tr = training.load_features(m, "train", cfg["channel"])
    stats = quant.calibrate(params, tr.features[:int(cfg["calib_clips"])],
                            float(cfg["percentile"]))
    q = quant.quantize_net(params, stats, int(cfg["bits"]))
    out = _out_dir(cfg)
    write_snapshot("quantize", cfg, out)
    path = quant.save_qparams(q, out / f"{Path(cfg['model']).stem}_q{q.bits}")
    print(f"wrote {path}")
    if cfg["evaluate"]:
        te = training.load_features(m, "test", cfg["channel"])
        acc_f, acc_q, delta = quant.accuracy_delta(params, q, te)
        report = {"acc_float": acc_f, "acc_quant": acc_q, "drop_points": delta}
        (out / "quant_report.json").write_text(json.dumps(report, indent=2))
        print(f"accuracy float {acc_f:.2f}%  quantized {acc_q:.2f}%  drop {delta:.2f} points")
    return EXIT_OK


def _gate(cfg: dict, enabled: bool = True) -> pipeline.GateConfig:
    try:
        return pipeline.GateConfig(enabled, float(cfg.get("threshold_db", -math.inf)),
                                   _skip_output(cfg["skip_output"]),
                                   pipeline.GatePolicy(cfg["policy"]), int(cfg["hangover"]))
    except ValueError as exc:
        raise CliError(f"gate: {exc}", EXIT_CONFIG) from exc


def cmd_infer(cfg: dict) -> int:
    model = load_model(cfg["model"])
    wav = Path(cfg["wav"])
    if not wav.exists():
        raise CliError(f"wav file not found: {wav}", EXIT_FILE)
    clip = audio.read_wav(wav)
    if clip.sample_rate_hz != audio.SAMPLE_RATE:
        clip = audio.resample_to_16k(clip)
    timing, _ = power.load_profile(cfg["profile"])
    gate = _gate(cfg, bool(cfg["gate"]))
    vs = pipeline.VadStream(model, gate, timing)
    preds = vs.push_samples(clip.samples)
    out = Path(cfg["out"]) if cfg.get("out") else wav.with_suffix(".predictions.csv")
    write_snapshot("infer", cfg, out.parent)
    pipeline.write_predictions_csv(preds, out)
    st = vs.state
    print(f"{st.frames_total} frames, {st.frames_skipped} skipped "
          f"({100 * st.skip_fraction:.1f}%), latency {vs.latency_ms:.2f} ms -> {out}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    bc, ac = load_model(cfg["bc_model"]), load_model(cfg["ac_model"])
    stems = evaluation.load_test_stems(_manifest(cfg["manifest"]))
    try:
        mode = evaluation.HarnessMode(cfg["mode"])
    except ValueError as exc:
        raise CliError(f"eval: unknown mode {cfg['mode']!r}", EXIT_CONFIG) from exc
    grid = _threshold_list(cfg["snr_grid"])
    if not grid:
        raise CliError("eval: empty SNR grid", EXIT_CONFIG)
    rows = evaluation.run_harness({"bc": bc, "ac": ac}, stems, grid, mode)
    out = _out_dir(cfg)
    write_snapshot("eval", cfg, out)
    path = out / f"eval_{mode.value}.csv"
    evaluation.write_harness_csv(rows, path)
    for r in rows:
        auc = "  n/a" if r.auc is None else f"{r.auc:.3f}"
        print(f"{r.snr_db:6.1f} dB {r.model:8s} auc {auc} dcf {r.dcf:.3f} acc {r.acc:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gate_sweep(cfg: dict) -> int:
    model = load_model(cfg["model"])
    stems = evaluation.load_test_stems(_manifest(cfg["manifest"]))
    thresholds = _threshold_list(cfg["thresholds"])
    gate = _gate(cfg)
    try:
        rows = pipeline.gate_sweep(model, stems, thresholds, gate.skip_output, gate.policy,
                                   gate.hangover_frames, float(cfg["snr_db"]))
    except pipeline.ConfigurationError as exc:
        raise CliError(f"gate-sweep: {exc}", EXIT_CONFIG) from exc
    out = _out_dir(cfg)
    write_snapshot("gate-sweep", cfg, out)
    path = out / "gate_sweep.csv"
    pipeline.write_sweep_csv(rows, path)
    for r in rows:
        print(f"{r.threshold_db:7.1f} dB  skip {100 * r.skip_fraction:5.1f}%  "
              f"acc {100 * r.accuracy:.2f}%")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_power(cfg: dict) -> int:
    names = cfg["profile"]
    names = names if isinstance(names, list) else [n for n in str(names).split(",") if n]
    fractions = _threshold_list(cfg["skip"])
    reports = []
    for name in names:
        if name not in power.BUILTIN_PROFILES and not Path(name).exists():
            raise CliError(f"unknown profile {name!r}", EXIT_FILE)
        soc, bat = power.load_profile(name)
        reports.extend(power.skip_sweep(soc, bat, fractions))
    print(f"{'profile':10s} {'skip':>5s} {'duty':>6s} {'P [mW]':>8s} {'I [uA]':>8s} "
          f"{'E [uJ]':>7s} {'lat [ms]':>8s} {'life [h]':>8s}")
    for r in reports:
        print(f"{r.profile:10s} {r.skip_fraction:5.2f} {r.duty_cycle:6.3f} "
              f"{r.avg_power_mw:8.3f} {r.avg_current_ua:8.1f} {r.energy_per_inference_uj:7.2f} "
              f"{r.worst_latency_ms:8.2f} {r.battery_life_h:8.2f}")
    if cfg.get("out"):
        out = Path(cfg["out"])
        write_snapshot("power", cfg, out)
        power.write_reports_csv(reports, out / "power.csv")
        (out / "power.json").write_text(power.reports_json(reports))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "train": cmd_train,
            "quantize": cmd_quantize, "infer": cmd_infer, "eval": cmd_eval,
            "gate-sweep": cmd_gate_sweep, "power": cmd_power}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcpvad", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML config file")
        return p

    p = add("synth", "generate the synthetic BC/AC corpus")
    p.add_argument("--out", help="dataset directory (created)")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-hours", type=float)
    p.add_argument("--test-hours", type=float)
    p.add_argument("--n-speakers", type=int)
    p.add_argument("--n-test-speakers", type=int)
    p.add_argument("--clip-len-s", type=float)
    p.add_argument("--bc-attenuation-db", type=float,
                   help="attenuation of external sources on the BC channel")

    p = add("features", "dump log-Mel features of one split as per-clip CSV")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--channel", choices=("bc", "ac"))

    p = add("train", "train a BC-pVAD or AC-pVAD model")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--channel", choices=("bc", "ac"))
    p.add_argument("--seed", type=int, help="batch sampling seed")
    p.add_argument("--model-seed", type=int, help="weight init seed")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--bptt-len", type=int)
    p.add_argument("--lr-halve-patience", type=int)
    p.add_argument("--early-stop-patience", type=int)

    p = add("quantize", "post-training int8/int16 quantization")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--channel", choices=("bc", "ac"))
    p.add_argument("--bits", type=int, choices=(8, 16))
    p.add_argument("--percentile", type=float, help="calibration clip percentile")
    p.add_argument("--calib-clips", type=int)
    p.add_argument("--no-evaluate", dest="evaluate", action="store_const", const=False)

    p = add("infer", "stream a WAV through a model, write per-frame predictions")
    p.add_argument("--model")
    p.add_argument("--wav")
    p.add_argument("--out", help="predictions CSV")
    p.add_argument("--gate", action="store_const", const=True, help="enable energy gating")
    p.add_argument("--threshold-db", type=float)
    p.add_argument("--hangover", type=int, help="sub-threshold frames processed before skipping")
    p.add_argument("--skip-output", help="probability for skipped frames, or 'hold'")
    p.add_argument("--policy", choices=("hold", "reset"), help="recurrent state on skips")
    p.add_argument("--profile", help="SoC profile for the latency model")

    p = add("eval", "equal-environment or equal-SNR harness")
    p.add_argument("--bc-model")
    p.add_argument("--ac-model")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", choices=("equal-env", "equal-snr"))
    p.add_argument("--snr-grid", help="comma-separated dB values")

    p = add("gate-sweep", "skip fraction and accuracy versus gate threshold")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--thresholds", help="comma-separated dB values")
    p.add_argument("--hangover", type=int)
    p.add_argument("--skip-output")
    p.add_argument("--policy", choices=("hold", "reset"))
    p.add_argument("--snr-db", type=float, help="mixture SNR on the BC channel")

    p = add("power", "power, latency and battery-life report")
    p.add_argument("--profile", help="comma-separated profile names or TOML paths")
    p.add_argument("--skip", help="comma-separated skip fractions")
    p.add_argument("--out", help="directory for power.csv / power.json")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (net.ModelFormatError, corpus.ManifestError, audio.AudioFormatError,
            audio.UnsupportedRateError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (net.NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (power.RangeError, quant.CalibrationError, training.ConfigurationError,
            pipeline.ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
