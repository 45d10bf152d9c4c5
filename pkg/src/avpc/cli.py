"""Command-line entry point: ``avpc <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_run_config
from .data import ClipBank, build_dataset, read_manifest, split_records, synth_clip, write_manifest
from .dsp import apply_mask_and_reconstruct, fit_length, load_wav, magnitude_spectrogram, mix_waveforms, save_wav, stft
from .evaluation import (
    MetricsReport,
    bss_metrics,
    cycle_sweep,
    evaluate_testset,
    plot_class_bars,
    plot_cycle_sweep,
    write_table,
)
from .model import AVPCModel, checkpoint_spectrogram, load_checkpoint, network_input, save_checkpoint
from .training import (
    TrainingDivergedError,
    curriculum_train,
    grad_check,
    heldout_projection_std,
    pretrain_rcop,
    sample_batch,
    train_mas,
    write_loss_curve,
)
from .validation import check_class_ids

log = logging.getLogger("avpc")

CLIP_NAME = re.compile(r"^c(\d+)_s(\d+)$")


class CLIError(Exception):
    pass


# -- shared plumbing --------------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _records(cfg: RunConfig):
    manifest = cfg.section("data").manifest
    if manifest:
        if not Path(manifest).is_file():
            raise CLIError(f"manifest not found: {manifest}")
        return read_manifest(manifest)
    return build_dataset(cfg.data_config())


def _bank(cfg: RunConfig, split: str) -> ClipBank:
    recs = split_records(_records(cfg), split)
    if not recs:
        raise CLIError(f"no records in split {split!r}")
    return ClipBank(recs, cfg.data_config())


def _new_model(cfg: RunConfig) -> AVPCModel:
    torch.manual_seed(cfg.seed)
    ms = cfg.model_settings()
    return AVPCModel(cfg.arch(), guidance=ms.guidance, n_classes=cfg.data_config().n_classes,
                     pooling=ms.pooling, freeze_trunk=ms.freeze_trunk)


def _require_checkpoint(args) -> tuple[AVPCModel, dict]:
    if not args.checkpoint:
        raise CLIError(f"'{args.command}' needs --checkpoint")
    if not Path(args.checkpoint).is_file():
        raise CLIError(f"checkpoint not found: {args.checkpoint}")
    try:
        model, payload = load_checkpoint(args.checkpoint)
    except Exception as exc:
        raise CLIError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    return model.eval(), payload


def _init_from(model: AVPCModel, path: str | None) -> None:
    if not path:
        return
    src, _ = load_checkpoint(path)
    missing, unexpected = model.load_state_dict(src.state_dict(), strict=False)
    if unexpected:
        raise CLIError(f"checkpoint {path} does not fit the configured model: {unexpected[:3]}")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _save_mask_png(mask: np.ndarray, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(path, np.clip(mask, 0, 1), cmap="magma", vmin=0.0, vmax=1.0, origin="lower")
    return path


# -- commands -----------------------------------------------------------------


def cmd_synth_data(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    records = build_dataset(cfg.data_config())
    path = write_manifest(records, out / "manifest.jsonl")
    if args.write_wav:
        wav_dir = out / "wav"
        wav_dir.mkdir(exist_ok=True)
        for r in records:
            audio, frames = synth_clip(r.class_id, r.seed, cfg.data_config())
            save_wav(audio, wav_dir / f"{r.clip_id}.wav")
            np.save(wav_dir / f"{r.clip_id}_frames.npy", frames.astype(np.float32))
    print(f"wrote {len(records)} records to {path}")


def cmd_train(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    tc = cfg.train_config()
    bank = _bank(cfg, "train")
    model = _new_model(cfg)
    _init_from(model, args.checkpoint)
    res = train_mas(model, bank, tc, out_dir=out, tag="mas", spectrogram=cfg.spectrogram())
    write_loss_curve(res.losses, out / "loss_curve.csv")
    path = save_checkpoint(out / "model.ckpt", model, seed=tc.seed, spectrogram=cfg.spectrogram(),
                           meta={"stage": "mas", "n_sources": tc.n_sources, "init": args.checkpoint or ""})
    print(f"final loss {np.mean(res.losses[-tc.steps_per_epoch:]):.4f}; checkpoint {path}")


def cmd_pretrain_rcop(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    tc = cfg.train_config()
    bank = _bank(cfg, "train")
    model = _new_model(cfg)
    _init_from(model, args.checkpoint)
    res = pretrain_rcop(model, bank, tc)
    write_loss_curve(res.losses, out / "rcop_loss.csv")
    std = heldout_projection_std(model, res.heads, _bank(cfg, "val"), seed=cfg.seed)
    path = save_checkpoint(out / "rcop.ckpt", model, seed=tc.seed, spectrogram=cfg.spectrogram(),
                           meta={"stage": "rcop", "projection_std": std},
                           extra_state={"heads": res.heads.state_dict()})
    _write_json(out / "rcop_summary.json", {"first_loss": res.losses[0] if res.losses else None,
                                            "final_loss": res.losses[-1] if res.losses else None,
                                            "heldout_projection_std": std})
    print(f"RCoP loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; held-out projection std {std:.4f}; {path}")


def cmd_curriculum(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    stages = [int(s) for s in args.stages.split(",") if s.strip()]
    if not stages or any(n < 2 for n in stages):
        raise CLIError("--stages must list source counts >= 2, e.g. 2,3,4")
    model = _new_model(cfg)
    _init_from(model, args.checkpoint)
    try:
        emitted = curriculum_train(model, _bank(cfg, "train"), cfg.train_config(), stages, out, cfg.spectrogram())
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    for n, path, res in emitted:
        print(f"stage N={n}: final loss {res.losses[-1]:.4f}; {path}")


def _visual_for(model: AVPCModel, names: list[str], visual_arg: str | None, data_cfg):
    """Class ids or frame stacks for each source, from --visual or from synthetic clip names."""
    if visual_arg:
        items = [v.strip() for v in visual_arg.split(",")]
        if len(items) != len(names):
            raise CLIError(f"--visual lists {len(items)} cues for {len(names)} sources")
        if model.guidance == "class":
            try:
                return torch.as_tensor(check_class_ids([int(v) for v in items], model.n_classes))
            except ValueError as exc:
                raise CLIError(str(exc)) from None
        stacks = []
        for v in items:
            if not Path(v).is_file():
                raise CLIError(f"frame file not found: {v}")
            stacks.append(np.load(v).astype(np.float32))
        return torch.as_tensor(np.stack(stacks))
    ids = []
    for name in names:
        m = CLIP_NAME.match(Path(name).stem)
        if not m:
            raise CLIError(f"cannot infer a visual cue for {name}; pass --visual")
        ids.append((int(m.group(1)), int(m.group(2))))
    if model.guidance == "class":
        return torch.tensor([c for c, _ in ids])
    return torch.as_tensor(np.stack([synth_clip(c, s, data_cfg)[1] for c, s in ids]).astype(np.float32))


def cmd_separate(args, cfg: RunConfig) -> None:
    model, payload = _require_checkpoint(args)
    sc = checkpoint_spectrogram(payload)
    if not args.mix:
        raise CLIError("'separate' needs --mix a.wav,b.wav")
    names = [p.strip() for p in args.mix.split(",") if p.strip()]
    if len(names) < 2:
        raise CLIError("--mix needs at least two WAV files")
    sources = []
    for n in names:
        if not Path(n).is_file():
            raise CLIError(f"WAV file not found: {n}")
        try:
            clip = load_wav(n, sc.sample_rate_hz)
        except ValueError as exc:
            raise CLIError(str(exc)) from None
        sources.append(fit_length(clip, sc.clip_samples))
    data_cfg = dataclasses.replace(cfg.data_config(), spectrogram=sc)
    visual = _visual_for(model, names, args.visual, data_cfg)
    mix = mix_waveforms(sources)
    dt = next(model.parameters()).dtype
    spec = network_input(magnitude_spectrogram(mix, sc)).to(dt).expand(len(names), -1, -1, -1)
    if visual.is_floating_point():
        visual = visual.to(dt)
    with torch.no_grad():
        masks, _, _ = model(spec, visual, T=model.arch.t_test)
    masks = masks[:, 0].double().numpy()
    out = _out_dir(cfg)
    save_wav(mix, out / "mixture.wav")
    comp = stft(mix, sc)
    refs = [s.samples for s in sources]
    metrics = []
    for i, name in enumerate(names):
        est = apply_mask_and_reconstruct(comp, masks[i], sc)
        save_wav(est, out / f"source_{i}.wav")
        _save_mask_png(masks[i], out / f"mask_{i}.png")
        sdr, sir, sar = bss_metrics(est, refs, i)
        metrics.append({"source": i, "input": name, "sdr": sdr, "sir": sir, "sar": sar})
    _write_json(out / "separation.json", metrics)
    for m in metrics:
        print(f"source {m['source']} ({m['input']}): SDR {m['sdr']:.2f} dB")


def cmd_eval(args, cfg: RunConfig) -> None:
    model, payload = _require_checkpoint(args)
    es = cfg.eval_settings()
    out = _out_dir(cfg)
    bank = _bank(cfg, es.split)
    rep = evaluate_testset(model, bank, n_sources=es.n_sources, T_test=es.t_test, seed=es.seed,
                           mixtures_per_clip=es.mixtures_per_clip, checkpoint_id=str(args.checkpoint),
                           exhaustive=es.exhaustive)
    rep.to_csv(out / "metrics_items.csv")
    rep.to_json(out / "metrics.json")
    plot_class_bars(rep, out / "metrics_by_class.png")
    s = rep.summary()
    print(f"median SDR {s['sdr_median']:.2f} dB (mixture baseline {s['baseline_sdr_median']:.2f}); "
          f"SIR {s['sir_median']:.2f}; SAR {s['sar_median']:.2f}")


def cmd_cycle_sweep(args, cfg: RunConfig) -> None:
    model, _ = _require_checkpoint(args)
    es = cfg.eval_settings()
    t_max = args.t_max if args.t_max is not None else es.t_max
    repeats = args.repeats if args.repeats is not None else es.repeats
    out = _out_dir(cfg)
    try:
        rows = cycle_sweep(model, _bank(cfg, es.split), t_max, repeats=repeats, n_sources=es.n_sources,
                           seed=es.seed, mixtures_per_clip=es.mixtures_per_clip)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    write_table(rows, out / "cycle_sweep.csv")
    plot_cycle_sweep(rows, out / "cycle_sweep.png")
    for r in rows:
        print(f"t={r['t']}: SDR {r['sdr']:.2f}  SIR {r['sir']:.2f}  SAR {r['sar']:.2f}")


def cmd_shape_sweep(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    sides = [int(s) for s in args.sides.split(",") if s.strip()]
    es = cfg.eval_settings()
    train_bank, test_bank = _bank(cfg, "train"), _bank(cfg, es.split)
    rows = []
    for side in sides:
        arch = dataclasses.replace(cfg.arch(), feature_side=side)
        torch.manual_seed(cfg.seed)
        ms = cfg.model_settings()
        model = AVPCModel(arch, guidance=ms.guidance, n_classes=cfg.data_config().n_classes,
                          pooling=ms.pooling, freeze_trunk=ms.freeze_trunk)
        train_mas(model, train_bank, cfg.train_config())
        save_checkpoint(out / f"shape_{side}x{side}.ckpt", model, seed=cfg.seed, spectrogram=cfg.spectrogram(),
                        meta={"stage": "shape-sweep", "feature_side": side})
        rep = evaluate_testset(model, test_bank, n_sources=es.n_sources, T_test=es.t_test, seed=es.seed,
                               mixtures_per_clip=es.mixtures_per_clip)
        rep.to_csv(out / f"shape_{side}x{side}_items.csv")
        s = rep.summary()
        rows.append({"feature_map": f"{side}x{side}", "sdr": s["sdr_median"], "sir": s["sir_median"],
                     "sar": s["sar_median"]})
        print(f"{side}x{side}: median SDR {s['sdr_median']:.2f}")
    write_table(rows, out / "shape_sweep.csv")


def cmd_gradcheck(args, cfg: RunConfig) -> None:
    if args.checkpoint:
        model, _ = _require_checkpoint(args)
    else:
        model = _new_model(cfg)
    model = model.double()
    data_cfg = dataclasses.replace(cfg.data_config(), per_class=4)
    bank = ClipBank(build_dataset(data_cfg), data_cfg)
    batch = sample_batch(bank, cfg.eval_settings().n_sources, 2, np.random.default_rng(cfg.seed))
    rep = grad_check(model, bank, batch, coords_per_family=args.coords, T=args.cycles, seed=cfg.seed)
    out = _out_dir(cfg)
    _write_json(out / "gradcheck.json", dataclasses.asdict(rep) | {"worst": rep.worst, "tolerance": args.tol})
    for fam, err in sorted(rep.max_rel_error.items()):
        print(f"{fam:14s} max rel error {err:.2e} ({rep.checked[fam]} coords, {rep.skipped.get(fam, 0)} kinks skipped)")
    if rep.worst >= args.tol:
        raise CLIError(f"gradient check failed: worst relative error {rep.worst:.2e} >= {args.tol:g}")


def cmd_report(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    paths = [Path(p.strip()) for p in (args.inputs or "").split(",") if p.strip()]
    if not paths:
        raise CLIError("'report' needs --inputs items.csv[,items2.csv...]")
    rows = []
    for p in paths:
        if not p.is_file():
            raise CLIError(f"per-item CSV not found: {p}")
        s = MetricsReport.from_csv(p).summary()
        rows.append({"source": str(p)} | {k: s[k] for k in sorted(s)})
    write_table(rows, out / "report.csv")
    _write_json(out / "report.json", rows)
    for r in rows:
        print(f"{r['source']}: median SDR {r['sdr_median']:.2f} over {r['n_items']} items")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "pretrain-rcop": cmd_pretrain_rcop,
    "curriculum": cmd_curriculum,
    "separate": cmd_separate,
    "eval": cmd_eval,
    "cycle-sweep": cmd_cycle_sweep,
    "shape-sweep": cmd_shape_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="section.key = value file")
    common.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--checkpoint", default=None)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="avpc", description="Visually guided predictive-coding source separation.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth-data", parents=[common], help="write the synthetic dataset manifest")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--write-wav", action="store_true", help="also write every clip as WAV + frames .npy")
    sub.add_parser("train", parents=[common], help="Mix-and-Separate training (--checkpoint initialises)")
    sub.add_parser("pretrain-rcop", parents=[common], help="RCoP self-supervised pretraining")
    p = sub.add_parser("curriculum", parents=[common], help="MaS stages with growing source counts")
    p.add_argument("--stages", default="2,3,4")
    p = sub.add_parser("separate", parents=[common], help="mix WAV files and separate them again")
    p.add_argument("--mix", help="comma-separated source WAVs")
    p.add_argument("--visual", help="comma-separated class ids or frame .npy files, one per source")
    sub.add_parser("eval", parents=[common], help="score a checkpoint on fixed test mixtures")
    p = sub.add_parser("cycle-sweep", parents=[common], help="SDR/SIR/SAR against inference cycle t")
    p.add_argument("--t-max", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p = sub.add_parser("shape-sweep", parents=[common], help="train and score several visual feature-map sizes")
    p.add_argument("--sides", default="1,2,4")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--coords", type=int, default=3)
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("report", parents=[common], help="summary tables from stored per-item CSVs")
    p.add_argument("--inputs", help="comma-separated per-item metric CSVs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = list(args.set)
    if args.command == "synth-data":
        if args.classes is not None:
            overrides.append(f"data.n_classes={args.classes}")
        if args.per_class is not None:
            overrides.append(f"data.per_class={args.per_class}")
    try:
        cfg = load_run_config(args.config, overrides, seed=args.seed,
                              out_dir=args.out or str(Path("runs") / args.command))
        out = _out_dir(cfg)
        cfg.write_snapshot(out)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, CLIError, TrainingDivergedError) as exc:
        print(f"avpc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
