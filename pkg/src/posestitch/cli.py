"""``posestitch`` command line: gen-corpus, pretrain-ae, train-diff, stitch, eval, render."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics
from .diffusion import make_schedule, parse_protocol, train_diffusion
from .pose_core import PoseSequence, Skeleton, flatten, load_pose_sequence, save_pose_sequence
from .render import render_sequence
from .seqmodel import ModelParams, NetworkConfig, TrainingOptions, encode, pretrain_autoencoder
from .stitcher import STRATEGIES, SegmentList, assemble, stitch
from .synthcorpus import CorpusConfig, carve_protocol, generate_corpus, read_corpus, write_corpus

log = logging.getLogger("posestitch")

COMMANDS = ("gen-corpus", "pretrain-ae", "train-diff", "stitch", "eval", "render")
MODES = ("refine-all", "hard-replace")
SEED_ENV = "POSESTITCH_SEED"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    corpus_dir: str = "corpus"
    joint_count: int = 5
    sequence_count: int = 32
    heldout_count: int = 8
    frames_per_sequence: int = 60
    keypose_count: int = 5
    pool_size: int = 12
    trajectory: str = "smoothstep"
    noise: float = 0.01
    # network
    latent_dim: int = 64
    head_count: int = 4
    feed_forward_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    denoiser_blocks: int = 2
    max_sequence_length: int = 256
    # schedule
    schedule_steps: int = 100
    schedule_kind: str = "linear-vp"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # training
    pretrain_steps: int = 1000
    diffusion_steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    mask_ratio: float = 0.3
    mask_protocol: str = "uniform"
    # inference / evaluation
    observe: int = 20
    predict: int = 10
    strategy: str = "eq8"
    mode: str = "refine-all"
    eval_modes: str = "refine-all,hard-replace"
    # paths
    ae_checkpoint: str = "ae.params"
    diff_checkpoint: str = "diff.params"
    ablation_checkpoints: str = ""
    segments: str = ""
    gap_length: int = 10
    stitch_output: str = "stitched.poseseq"
    report_path: str = "report.txt"
    render_input: str = "stitched.poseseq"
    render_dir: str = "frames"

    def network(self) -> NetworkConfig:
        return NetworkConfig(3 * self.joint_count, self.latent_dim, self.head_count,
                             self.feed_forward_dim, self.encoder_layers, self.decoder_layers,
                             self.denoiser_blocks, self.max_sequence_length)

    def schedule(self):
        return make_schedule(self.schedule_steps, self.schedule_kind, self.beta_start, self.beta_end)

    def corpus(self) -> CorpusConfig:
        return CorpusConfig(Skeleton.chain(self.joint_count), self.sequence_count + self.heldout_count,
                            self.frames_per_sequence, self.keypose_count, self.pool_size,
                            self.trajectory, self.noise, self.seed)

    def validate(self) -> None:
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio", "must lie in [0, 1]")
        try:
            parse_protocol(self.mask_protocol)
        except ValueError as exc:
            raise ConfigError("mask_protocol", str(exc)) from None
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"expected one of {', '.join(STRATEGIES)}")
        if self.mode not in MODES:
            raise ConfigError("mode", f"expected one of {', '.join(MODES)}")
        for m in self._list(self.eval_modes):
            if m not in MODES:
                raise ConfigError("eval_modes", f"unknown mode {m!r}")
        for name in ("joint_count", "sequence_count", "frames_per_sequence", "schedule_steps",
                     "batch_size", "observe", "predict", "gap_length"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        for name in ("pretrain_steps", "diffusion_steps", "heldout_count"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be nonnegative")
        try:
            self.network()
        except ValueError as exc:
            raise ConfigError("latent_dim", str(exc)) from None

    @staticmethod
    def _list(text: str) -> list[str]:
        return [t.strip() for t in text.split(",") if t.strip()]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(name, "unknown configuration key")
    kind = type(getattr(RunConfig(), name))
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    """Read ``key = value`` lines, then apply overrides and the seed env var."""
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file {path} does not exist")
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", "expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    values.update(overrides)
    if SEED_ENV in os.environ:
        values["seed"] = os.environ[SEED_ENV]
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        for item in RunConfig._list(getattr(cfg, name)) or [""]:
            if not item or not Path(item).exists():
                raise ConfigError(name, f"path {item!r} does not exist")


def _training(cfg: RunConfig, steps: int) -> TrainingOptions:
    return TrainingOptions(steps=steps, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                           log_every=max(steps // 10, 1))


def _load_models(cfg: RunConfig, diff_path: str):
    ae = ModelParams.load(cfg.ae_checkpoint)
    den = ModelParams.load(diff_path)
    if ae.kind != "autoencoder" or den.kind != "denoiser":
        raise ValueError("checkpoint kinds do not match (autoencoder, denoiser)")
    if ae.config != den.config:
        raise ValueError(f"network config mismatch between {cfg.ae_checkpoint} and {diff_path}")
    if ae.config != cfg.network():
        raise ValueError(f"{cfg.ae_checkpoint} was trained with a different network config")
    if int(den.meta.get("schedule.T", cfg.schedule_steps)) != cfg.schedule_steps:
        raise ValueError(f"{diff_path} was trained with T={den.meta['schedule.T']}, config has {cfg.schedule_steps}")
    return ae, den


def cmd_gen_corpus(cfg: RunConfig) -> None:
    seqs = generate_corpus(cfg.corpus())
    write_corpus(cfg.corpus_dir, {"train": seqs[: cfg.sequence_count], "heldout": seqs[cfg.sequence_count :]},
                 cfg.corpus(), {"heldout_count": str(cfg.heldout_count)})


def cmd_pretrain(cfg: RunConfig) -> None:
    _require(cfg, "corpus_dir")
    model = pretrain_autoencoder(read_corpus(cfg.corpus_dir, "train"), cfg.network(),
                                 _training(cfg, cfg.pretrain_steps), cfg.seed)
    model.save(cfg.ae_checkpoint)
    log.info("autoencoder saved to %s (final loss %s)", cfg.ae_checkpoint, model.meta.get("final_loss"))


def cmd_train_diff(cfg: RunConfig) -> None:
    _require(cfg, "corpus_dir", "ae_checkpoint")
    ae = ModelParams.load(cfg.ae_checkpoint)
    model = train_diffusion(read_corpus(cfg.corpus_dir, "train"), ae, cfg.network(), cfg.schedule(),
                            cfg.mask_ratio, _training(cfg, cfg.diffusion_steps), cfg.seed,
                            cfg.mask_protocol)
    model.save(cfg.diff_checkpoint)
    log.info("denoiser saved to %s (final loss %s)", cfg.diff_checkpoint, model.meta.get("final_loss"))


def cmd_stitch(cfg: RunConfig) -> None:
    _require(cfg, "ae_checkpoint", "diff_checkpoint", "segments")
    ae, den = _load_models(cfg, cfg.diff_checkpoint)
    segs = SegmentList(tuple(load_pose_sequence(p) for p in RunConfig._list(cfg.segments)), cfg.gap_length)
    out = stitch(segs, ae, den, cfg.schedule(), cfg.strategy, cfg.mode, cfg.seed)
    save_pose_sequence(out, cfg.stitch_output)


def _latent(seq: PoseSequence, ae: ModelParams) -> np.ndarray:
    return encode(flatten(seq).astype(np.float32), ae, ae.config).data


def _score(outputs, truths, gap_sets, ae) -> dict[str, float]:
    gap_pred, gap_true = [], []
    for out, truth, ranges in zip(outputs, truths, gap_sets):
        for lo, hi in ranges:
            gap_pred.append(out.frames[lo:hi])
            gap_true.append(truth.frames[lo:hi])
    fid = metrics.frechet_distance(metrics.feature_stats([_latent(s, ae) for s in outputs]),
                                   metrics.feature_stats([_latent(s, ae) for s in truths]))
    return {
        "mpjpe": float(np.mean([metrics.mpjpe(p, t) for p, t in zip(gap_pred, gap_true)])),
        "dtw": float(np.mean([metrics.dtw(p.reshape(len(p), -1), t.reshape(len(t), -1))
                              for p, t in zip(gap_pred, gap_true)])),
        "dtw_raw": float(np.mean([metrics.dtw_cost(p.reshape(len(p), -1), t.reshape(len(t), -1))
                                  for p, t in zip(gap_pred, gap_true)])),
        "fid": fid,
    }


def evaluate(cfg: RunConfig) -> dict[str, float]:
    """Padding-only and stitched scores on held-out gaps for every strategy, mode and checkpoint."""
    truths = read_corpus(cfg.corpus_dir, "heldout")
    checkpoints = [cfg.diff_checkpoint] + RunConfig._list(cfg.ablation_checkpoints)
    models = [_load_models(cfg, path) for path in checkpoints]
    ae = models[0][0]
    schedule = cfg.schedule()
    carved = [carve_protocol(s, cfg.observe, cfg.predict) for s in truths]
    gap_sets = [segs.gap_ranges() for segs, _ in carved]
    report: dict[str, float] = {}
    for strategy in STRATEGIES:
        padded = [assemble(segs, strategy)[0] for segs, _ in carved]
        for metric, value in _score(padded, truths, gap_sets, ae).items():
            report[f"pad/{strategy}/{metric}"] = value
    for path, (_, den) in zip(checkpoints, models):
        ratio = float(den.meta.get("mask_ratio", "nan"))
        for mode in RunConfig._list(cfg.eval_modes):
            for strategy in STRATEGIES:
                outs = [stitch(segs, ae, den, schedule, strategy, mode, cfg.seed + i)
                        for i, (segs, _) in enumerate(carved)]
                for metric, value in _score(outs, truths, gap_sets, ae).items():
                    report[f"r{ratio:g}/{mode}/{strategy}/{metric}"] = value
        log.info("evaluated %s (mask ratio %g)", path, ratio)
    return report


def cmd_eval(cfg: RunConfig) -> None:
    _require(cfg, "corpus_dir", "ae_checkpoint", "diff_checkpoint")
    if cfg.ablation_checkpoints:
        _require(cfg, "ablation_checkpoints")
    metrics.write_report(cfg.report_path, evaluate(cfg))


def cmd_render(cfg: RunConfig) -> None:
    _require(cfg, "render_input")
    render_sequence(load_pose_sequence(cfg.render_input), cfg.render_dir)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain-ae": cmd_pretrain,
    "train-diff": cmd_train_diff,
    "stitch": cmd_stitch,
    "eval": cmd_eval,
    "render": cmd_render,
}


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    it = iter(extra)
    for token in it:
        if not token.startswith("--"):
            raise ConfigError(token, "overrides must be '--key value' pairs")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(key, "missing override value")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posestitch",
        description="Synthesize transition frames between pose segments with masked latent diffusion.",
        epilog="Any configuration key may be overridden with --key value.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("-c", "--config", help="flat 'key = value' configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)  # exits 2 with usage on unknown command
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _parse_overrides(extra))
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"posestitch: config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"posestitch: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
