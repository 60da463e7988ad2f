"""Command-line pipeline: synth, simulate, echo, flow, dataset, pretrain, finetune,
predict, eval-lopo, saliency and bench.

Every stage reads its inputs from disk, writes into ``--out`` and prints
``key=value`` lines on stdout.  Errors are printed to stderr prefixed ``ERR:``
and mapped to exit codes 1 (usage/config), 2 (data) and 3 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, EchoactError, NumericalError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("echoact")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _emit(**kv) -> None:
    for k, v in kv.items():
        print(f"{k}={v}")


# ------------------------------------------------------------------ shared helpers


def _out(args, cfg) -> Path:
    root = Path(getattr(args, "out", None) or cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _meta(cfg, **extra) -> dict:
    return {"config_hash": cfg.hash, **extra}


def _chirp_waves(cfg):
    from .signal import generate_chirp

    left, right = cfg.chirps()
    return generate_chirp(left), generate_chirp(right)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} {path} does not exist")
    return path


def _write_log(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for epoch, loss, lr in history:
            w.writerow([epoch, f"{loss:.8g}", f"{lr:.8g}"])


def _check_history(history, stage: str) -> None:
    if any(not np.isfinite(h[1]) for h in history):
        raise NumericalError(f"{stage} loss became non-finite")


def _load_model(path: Path):
    from .dataset import make_class_table
    from .learn import Network

    net, desc = Network.load(_need(path, "model"))
    names = desc.get("classes", "")
    table = make_class_table(names.split(",")) if names else None
    return net, desc, table


# ------------------------------------------------------------------ stages


def cmd_synth(args, cfg) -> int:
    from .formats import write_wav

    out = _out(args, cfg)
    tx_l, tx_r = _chirp_waves(cfg)
    for name, w in (("chirp_left.wav", tx_l), ("chirp_right.wav", tx_r)):
        write_wav(out / name, w.samples, w.sample_rate, _meta(cfg))
    _emit(chirp_left=out / "chirp_left.wav", chirp_right=out / "chirp_right.wav",
          n_samples=len(tx_l), sample_rate=tx_l.sample_rate)
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    from .catalog import synth_activity_scene
    from .channel import load_scene, save_scene, simulate, write_truth_csv
    from .formats import write_wav

    out = _out(args, cfg)
    if args.scene:
        scene = load_scene(_need(Path(args.scene), "scene file"))
    elif cfg.scene:
        scene = load_scene(cfg.scene)
    else:
        scene = synth_activity_scene(cfg.scene_class, cfg.duration, cfg.seed, cfg.snr_db)
    tx_l, tx_r = _chirp_waves(cfg)
    mics = simulate(tx_l, tx_r, scene, cfg.seed)
    stereo = mics.as_array()
    peak = float(np.max(np.abs(stereo))) if stereo.size else 0.0
    gain = 1.0 / peak if peak > 1.0 else 1.0  # keep PCM export unclipped
    write_wav(out / "mic.wav", stereo * gain, tx_l.sample_rate, _meta(cfg, gain=repr(gain)))
    write_truth_csv(mics.truth, out / "truth.csv", _meta(cfg))
    save_scene(scene, out / "scene.txt")
    _emit(mic=out / "mic.wav", truth=out / "truth.csv", samples=stereo.shape[1],
          sweeps=stereo.shape[1] // len(tx_l), config_hash=cfg.hash)
    return EXIT_OK


def cmd_echo(args, cfg) -> int:
    from .channel import MicStreams
    from .echo import align_streams, compute_echo_profile, find_sweep_offset
    from .formats import read_wav, write_profile
    from .signal import Waveform

    out = _out(args, cfg)
    src = Path(args.mic) if args.mic else out / "mic.wav"
    audio, rate = read_wav(_need(src, "microphone recording"))
    if audio.shape[0] != 2:
        raise DataError(f"{src}: expected a 2-channel recording, got {audio.shape[0]} channel(s)")
    if not np.isclose(rate, cfg.sample_rate):
        raise DataError(f"{src}: sample rate {rate} differs from configured {cfg.sample_rate}")
    mics = MicStreams(Waveform(audio[0], rate), Waveform(audio[1], rate), [])
    tx_l, tx_r = _chirp_waves(cfg)
    offset = 0
    if args.align:
        offset = find_sweep_offset(tx_l, mics.left)
        mics = align_streams(mics, offset)
    profile = compute_echo_profile(tx_l, tx_r, mics)
    write_profile(out / "profile.aepf", profile, _meta(cfg, kind="profile", offset=offset))
    _emit(profile=out / "profile.aepf", frames=profile.n_frames, lags=profile.data.shape[1], offset=offset)
    return EXIT_OK


def cmd_flow(args, cfg) -> int:
    from .echo import acoustic_flow, extract_windows
    from .formats import read_profile, write_profile, write_window

    out = _out(args, cfg)
    src = Path(args.profile) if args.profile else out / "profile.aepf"
    profile, meta = read_profile(_need(src, "echo profile"))
    chash = meta.get("config_hash", cfg.hash)
    flow = acoustic_flow(profile)
    write_profile(out / "flow.aepf", flow, {"config_hash": chash, "kind": "flow"})
    windows = extract_windows(flow)
    wdir = out / "windows"
    wdir.mkdir(exist_ok=True)
    for old in wdir.glob("*.aefw"):
        old.unlink()
    for i, w in enumerate(windows):
        write_window(wdir / f"w{i:05d}.aefw", w, {"config_hash": chash})
    _emit(flow=out / "flow.aepf", windows=len(windows), window_dir=wdir)
    return EXIT_OK


def cmd_dataset(args, cfg) -> int:
    from .dataset import (LabeledDataset, align_labels, build_synthetic_dataset, make_class_table,
                          read_label_csv, save_dataset)
    from .formats import read_window

    out = _out(args, cfg)
    target = out / "dataset"
    if args.synthetic:
        ds = build_synthetic_dataset(cfg.n_groups, cfg.seconds_per_class, cfg.seed,
                                     snr_db=cfg.snr_db, chirps=cfg.chirps())
        chash = cfg.hash
    else:
        if not args.windows:
            raise UsageError("dataset needs --synthetic or at least one --windows/--labels/--group triple")
        if not (len(args.windows) == len(args.labels or []) == len(args.group or [])):
            raise UsageError("--windows, --labels and --group must be given the same number of times")
        table = make_class_table()
        items, hashes = [], set()
        for wdir, lpath, group in zip(args.windows, args.labels, args.group):
            files = sorted(_need(Path(wdir), "window directory").glob("*.aefw"))
            if not files:
                raise DataError(f"{wdir}: no .aefw windows")
            loaded = [read_window(f) for f in files]
            hashes |= {m.get("config_hash", "") for _, m in loaded}
            labels = read_label_csv(_need(Path(lpath), "label file"))
            items += align_labels([w for w, _ in loaded], labels, table, group)
        if len(hashes) > 1:
            raise DataError(f"windows come from different configurations: {sorted(hashes)}")
        ds = LabeledDataset.grouped(items, table)
        chash = hashes.pop()
    save_dataset(ds, target, chash)
    counts = np.bincount(ds.targets(), minlength=ds.n_classes)
    _emit(dataset=target, windows=len(ds), groups=",".join(ds.groups),
          class_counts=",".join(f"{c.name}:{n}" for c, n in zip(ds.class_table, counts)))
    return EXIT_OK


def _load_ds(path: Path, require_single_hash: bool = True):
    from .dataset import load_dataset

    ds, manifest, hashes = load_dataset(_need(path, "dataset"), return_hashes=True)
    hashes.add(manifest.get("config_hash", ""))
    if require_single_hash and len(hashes) > 1:
        raise DataError(f"{path}: windows carry mixed config hashes {sorted(hashes)}")
    return ds, next(iter(hashes))


def cmd_pretrain(args, cfg) -> int:
    from .learn import pretrain
    from .plotting import plot_history

    out = _out(args, cfg)
    ds, chash = _load_ds(Path(args.dataset) if args.dataset else out / "dataset")
    model, history = pretrain([it.window for it in ds.items], cfg.train(), cfg.mask())
    _check_history(history, "pretraining")
    model.save(out / "encoder.amdl", {"config_hash": chash, "stage": "pretrain"})
    _write_log(history, out / "pretrain_log.csv")
    plot_history(history, out / "pretrain_loss.png", "masked reconstruction MSE", {"config_hash": chash})
    _emit(model=out / "encoder.amdl", epochs=len(history),
          final_loss=f"{history[-1][1]:.6g}" if history else "nan")
    return EXIT_OK


def cmd_finetune(args, cfg) -> int:
    from .learn import Network, finetune
    from .plotting import plot_history

    out = _out(args, cfg)
    ds, chash = _load_ds(Path(args.dataset) if args.dataset else out / "dataset")
    encoder = None
    if args.encoder:
        encoder, desc = Network.load(_need(Path(args.encoder), "encoder"))
        if desc.get("config_hash", chash) != chash:
            raise DataError("encoder and dataset were produced under different configurations")
    model, history = finetune(encoder, ds, cfg.train())
    _check_history(history, "fine-tuning")
    classes = ",".join(c.name for c in ds.class_table)
    model.save(out / "model.amdl", {"config_hash": chash, "stage": "finetune", "classes": classes})
    _write_log(history, out / "finetune_log.csv")
    plot_history(history, out / "finetune_loss.png", "focal loss", {"config_hash": chash})
    _emit(model=out / "model.amdl", epochs=len(history), degenerate=model.degenerate,
          final_loss=f"{history[-1][1]:.6g}" if history else "nan")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    from .echo import acoustic_flow
    from .formats import read_profile
    from .learn import predict

    out = _out(args, cfg)
    model, _, table = _load_model(Path(args.model) if args.model else out / "model.amdl")
    if table is None:
        raise DataError("model checkpoint carries no class table; was it fine-tuned?")
    src = Path(args.input) if args.input else out / "flow.aepf"
    profile, meta = read_profile(_need(src, "profile"))
    flow = acoustic_flow(profile) if meta.get("kind", "flow") == "profile" else profile
    preds = predict(model, flow, table)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "label", *[c.name for c in table]])
        for p in preds:
            w.writerow([f"{p.time_s:.3f}", p.label.name, *[f"{v:.6f}" for v in p.probs]])
    for p in preds:
        print(f"{p.time_s:.3f},{p.label.name},{float(np.max(p.probs)):.4f}")
    _emit(predictions=out / "predictions.csv", count=len(preds))
    return EXIT_OK


def cmd_eval_lopo(args, cfg) -> int:
    from .evaluation import crop_dataset, run_lopo, write_report

    out = _out(args, cfg)
    ds, chash = _load_ds(Path(args.dataset) if args.dataset else out / "dataset")
    stage2 = None
    if args.stage2:
        stage2, h2 = _load_ds(Path(args.stage2))
        if h2 != chash:
            raise DataError(f"refusing mixed config hashes {chash} and {h2}")
        stage2 = crop_dataset(stage2, args.region)
    report = run_lopo(crop_dataset(ds, args.region), cfg.train(), not args.no_pretrain, cfg.mask(),
                      stage2=stage2, groups=args.groups.split(",") if args.groups else None)
    paths = write_report(report, out / "report", chash)
    for g in report.groups:
        print(f"{g.group},{g.macro_f1:.4f}")
    _emit(macro_f1=f"{report.macro_f1:.4f}", mean_group_f1=f"{report.mean_group_f1:.4f}",
          std_group_f1=f"{report.std_group_f1:.4f}", summary=paths["summary"], confusion=paths["png"])
    return EXIT_OK


def cmd_saliency(args, cfg) -> int:
    from .dataset import lookup_class
    from .formats import read_window
    from .plotting import plot_window
    from .saliency import grad_cam, occlusion_saliency, rank_agreement, write_saliency_csv

    out = _out(args, cfg) / "saliency"
    out.mkdir(exist_ok=True)
    model, _, table = _load_model(Path(args.model))
    if not args.window:
        raise UsageError("saliency needs at least one --window file")
    for path in args.window:
        window, _ = read_window(_need(Path(path), "window"))
        if args.cls is None:
            from .learn import predict_proba
            cls_idx = int(np.argmax(predict_proba(model, window.data[None])[0]))
            cls = table[cls_idx] if table else cls_idx
        else:
            cls = lookup_class(table, args.cls) if table else int(args.cls)
        stem = Path(path).stem
        maps = {}
        if args.method in ("grad-cam", "both"):
            maps["gradcam"] = grad_cam(model, window, cls)
        if args.method in ("occlusion", "both"):
            maps["occlusion"] = occlusion_saliency(model, window, cls, (args.patch, args.patch))
        for name, m in maps.items():
            write_saliency_csv(m, out / f"{stem}_{name}.csv")
            plot_window(window.data, out / f"{stem}_{name}.png", window.frame_rate, m.values,
                        f"{m.method} for {m.class_id.name}")
            print(f"{stem},{name},{m.class_id.name},{m.band_mass():.4f},{m.degenerate}")
        if len(maps) == 2:
            _emit(spearman=f"{rank_agreement(maps['gradcam'], maps['occlusion']):.4f}")
    _emit(saliency_dir=out)
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    from .evaluation import bench_throughput

    r = bench_throughput(args.seconds, cfg.seed, args.repeats)
    _emit(seconds=r.seconds_of_audio, wall_time_s=f"{r.wall_time_s:.4f}",
          realtime_factor=f"{r.realtime_factor:.4f}", frames=r.n_frames,
          frames_per_second=f"{r.frames_per_second:.1f}", windows=r.n_windows)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "simulate": cmd_simulate, "echo": cmd_echo, "flow": cmd_flow,
    "dataset": cmd_dataset, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "predict": cmd_predict, "eval-lopo": cmd_eval_lopo, "saliency": cmd_saliency, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value run configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="echoact", description="Acoustic echo-profile activity recognition pipeline.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"echoact {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    add("synth", "write the left/right chirp sweeps as WAV")
    s = add("simulate", "render a scene to microphone WAV and per-sweep truth")
    s.add_argument("--scene", help="scene file (overrides the config)")
    s = add("echo", "microphone WAV -> four-path echo profile (AEPF)")
    s.add_argument("--mic", help="stereo microphone WAV (default OUT/mic.wav)")
    s.add_argument("--align", action="store_true", help="shift the stream so the strongest echo sits at lag 0")
    s = add("flow", "echo profile -> acoustic flow and AEFW windows")
    s.add_argument("--profile", help="AEPF echo profile (default OUT/profile.aepf)")
    s = add("dataset", "windows + labels -> dataset container")
    s.add_argument("--synthetic", action="store_true", help="render the built-in activity catalog")
    s.add_argument("--windows", action="append", help="directory of AEFW windows (repeatable)")
    s.add_argument("--labels", action="append", help="label CSV start_s,end_s,label (repeatable)")
    s.add_argument("--group", action="append", help="group name for the matching --windows")
    s = add("pretrain", "masked-reconstruction pretraining")
    s.add_argument("--dataset", help="dataset directory (default OUT/dataset)")
    s = add("finetune", "focal-loss classifier training")
    s.add_argument("--dataset", help="dataset directory (default OUT/dataset)")
    s.add_argument("--encoder", help="pretrained checkpoint to start from")
    s = add("predict", "1 Hz activity predictions for a profile or flow")
    s.add_argument("--model", help="classifier checkpoint (default OUT/model.amdl)")
    s.add_argument("--input", help="AEPF profile or flow (default OUT/flow.aepf)")
    s = add("eval-lopo", "leave-one-group-out evaluation")
    s.add_argument("--dataset", help="dataset directory (default OUT/dataset)")
    s.add_argument("--stage2", help="second dataset for the two-stage protocol")
    s.add_argument("--no-pretrain", action="store_true")
    s.add_argument("--region", choices=("full", "face", "body"), default="full")
    s.add_argument("--groups", help="comma-separated subset of held-out groups")
    s = add("saliency", "Grad-CAM and occlusion maps for windows")
    s.add_argument("--model", required=True)
    s.add_argument("--window", action="append", help="AEFW window file (repeatable)")
    s.add_argument("--class", dest="cls", help="class name or id (default: predicted class)")
    s.add_argument("--method", choices=("grad-cam", "occlusion", "both"), default="both")
    s.add_argument("--patch", type=int, default=16)
    s = add("bench", "time echo + flow + windowing on synthetic audio")
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--repeats", type=int, default=3)
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import load_config

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ERR: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(getattr(args, "config", None), seed=getattr(args, "seed", None))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"ERR: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ERR: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"ERR: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EchoactError as exc:
        print(f"ERR: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
