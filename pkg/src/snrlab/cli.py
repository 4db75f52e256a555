"""``snrlab`` command line: density tables, pre-training, fine-tuning, sampling, switching, ablations.

Every command reads an optional JSON run config (``--config``); ``--set
section.key=value`` and the dedicated flags override file values. Unknown
keys are rejected. Outputs go under ``out_dir``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import stats

from . import checkpoint as ckpt_io
from .diffusion import OffsetNoiseConfig
from .errors import CheckpointFormatError, DivergenceError
from .experiments import finetune_and_score, grid_conditions, mean_content_score, reference_set, switch_grid, toy_corpus
from .generate import GenerationConfig, euler_sample, to_uint8
from .net import Architecture
from .samplers import StyleFriendly, emit_density_table, sampler_from_dict
from .styledata import STYLES, style_score
from .train import LoraConfig, TrainConfig, finetune, pretrain

log = logging.getLogger("snrlab")


# -- run config ---------------------------------------------------------------


@dataclass
class DataSection:
    per_pair: int = 8
    seed: int = 0
    held_out: list[int] = field(default_factory=lambda: [5])
    reference_style: int = 5
    reference_per_pair: int = 2
    reference_seed: int = 7


@dataclass
class ArchSection:
    n_content: int = 4
    n_style: int = 6
    image_shape: list[int] = field(default_factory=lambda: [3, 16, 16])
    hidden_widths: list[int] = field(default_factory=lambda: [256, 256])
    time_embed_dim: int = 32
    cond_embed_dim: int = 16
    cond_proj_dim: int = 32


@dataclass
class TrainSection:
    objective: str = "dm"
    sampler: dict = field(default_factory=lambda: {"kind": "logit_normal", "m": 0.0, "s": 1.0})
    steps: int = 300
    lr: float = 3e-3
    grad_accum: int = 4
    batch_size: int = 1
    p_drop: float = 0.1
    p_drop_style: float = 0.0
    offset_noise: float = 0.0
    lora_rank: int = 32
    lora_alpha: float | None = None
    lora_targets: str | list[str] = "default"
    beta_T: float = 1.0
    seed: int = 0


def _pretrain_defaults():
    return TrainSection(steps=10_000, lr=1e-3, grad_accum=1, batch_size=32, p_drop_style=0.1)


def _finetune_defaults():
    return TrainSection(sampler={"kind": "style_friendly", "mu": -6.0, "sigma": 2.0})


@dataclass
class GenerationSection:
    steps: int = 28
    guidance_scale: float = 3.0
    shift: float = 0.17
    seed: int = 0


@dataclass
class SampleSection:
    style: int = 5
    contents: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    per_content: int = 16


@dataclass
class SwitchSection:
    fractions: list[float] = field(default_factory=lambda: [0.0, 0.1, 1.0])
    styles: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    per_content: int = 16


@dataclass
class AnalyzeSection:
    samplers: list[dict] = field(
        default_factory=lambda: [
            {"kind": "uniform_time"},
            {"kind": "logit_normal", "m": 0.0, "s": 1.0},
            {"kind": "style_friendly", "mu": -6.0, "sigma": 2.0},
            {"kind": "edm_lognormal", "p_mean": -1.2, "p_std": 1.2},
        ]
    )
    grid: int = 16_000
    lam_min: float = -40.0
    lam_max: float = 40.0
    mc_samples: int = 1_000_000
    bins: int = 400
    seed: int = 0


@dataclass
class AblateSection:
    mu: list[float] = field(default_factory=lambda: [0.0, -2.0, -4.0, -6.0, -8.0])
    sigma: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0])
    rank: list[int] = field(default_factory=lambda: [4, 32])
    seeds: list[int] = field(default_factory=lambda: [0])
    cells: list[int] | None = None
    per_content: int = 16


@dataclass
class RunConfig:
    out_dir: str = "runs"
    base: str | None = None
    adapter: str | None = None
    data: DataSection = field(default_factory=DataSection)
    arch: ArchSection = field(default_factory=ArchSection)
    pretrain: TrainSection = field(default_factory=_pretrain_defaults)
    finetune: TrainSection = field(default_factory=_finetune_defaults)
    generation: GenerationSection = field(default_factory=GenerationSection)
    sample: SampleSection = field(default_factory=SampleSection)
    switch: SwitchSection = field(default_factory=SwitchSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ConfigError(ValueError):
    pass


def _merge(obj, values: dict, where: str):
    """Write ``values`` into dataclass ``obj``, recursing into sections."""
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key!r}; allowed: {sorted(known)}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        _merge(cfg, doc, "")
    for text in overrides:
        keys, value = _parse_override(text)
        nested: object = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested, "")
    return cfg


def build_arch(sec: ArchSection) -> Architecture:
    return Architecture(**dataclasses.asdict(sec))


def build_train(sec: TrainSection, with_lora: bool) -> TrainConfig:
    lora = None
    if with_lora:
        lora = LoraConfig(
            targets=sec.lora_targets if isinstance(sec.lora_targets, str) else tuple(sec.lora_targets),
            rank=sec.lora_rank,
            alpha=sec.lora_alpha,
        )
    return TrainConfig(
        objective=sec.objective,
        sampler=sampler_from_dict(sec.sampler),
        steps=sec.steps,
        lr=sec.lr,
        grad_accum=sec.grad_accum,
        batch_size=sec.batch_size,
        p_drop=sec.p_drop,
        p_drop_style=sec.p_drop_style,
        offset=OffsetNoiseConfig(sec.offset_noise),
        lora=lora,
        beta_T=sec.beta_T,
        seed=sec.seed,
    )


def build_generation(sec: GenerationSection) -> GenerationConfig:
    return GenerationConfig(**dataclasses.asdict(sec))


# -- output helpers -------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x) -> str:
    return repr(float(x))


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_png(path: Path, image_chw, sidecar: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image_chw)).save(path, format="PNG")
    _write_json(path.with_suffix(".json"), sidecar)


def _contact_sheet(images, cols: int = 16):
    n, c, h, w = images.shape
    rows = -(-n // cols)
    sheet = np.full((c, rows * h, cols * w), -1.0)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        sheet[:, r * h : (r + 1) * h, q * w : (q + 1) * w] = img
    return sheet


def _loss_rows(trace):
    return [(i + 1, _fmt(v)) for i, v in enumerate(trace)]


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} checkpoint path not given (use --{what} or the '{what}' config key)")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} checkpoint not found: {p}")
    return p


def _load_models(cfg: RunConfig, need_adapter=False):
    arch = build_arch(cfg.arch)
    params, _ = ckpt_io.load_params(_require(cfg.base, "base"), arch)
    adapter = None
    if cfg.adapter is not None or need_adapter:
        adapter, _ = ckpt_io.load_adapter(_require(cfg.adapter, "adapter"), params)
    return params, adapter


# -- commands ---------------------------------------------------------------------


def cmd_analyze_sampler(cfg: RunConfig) -> Path:
    """Closed-form lambda and t densities plus Monte Carlo histograms per sampler."""
    out = Path(cfg.out_dir)
    sec = cfg.analyze
    summary = []
    for i, spec in enumerate(sec.samplers):
        sampler = sampler_from_dict(spec)
        tag = f"{i}_{spec['kind']}"
        table = emit_density_table(sampler, sec.grid, (sec.lam_min, sec.lam_max))
        _write_csv(out / f"density_lambda_{tag}.csv", ("x", "p"), zip(map(_fmt, table.lam), map(_fmt, table.p_lam)))
        _write_csv(out / f"density_time_{tag}.csv", ("x", "p"), zip(map(_fmt, table.t), map(_fmt, table.p_t)))
        rng = np.random.default_rng(sec.seed)
        lam, _ = sampler.sample(rng, sec.mc_samples)
        ks = stats.kstest(lam, sampler.cdf_lambda).statistic
        counts, edges = np.histogram(lam, bins=sec.bins, range=(sec.lam_min, sec.lam_max))
        centres = 0.5 * (edges[1:] + edges[:-1])
        dens = counts / (sec.mc_samples * np.diff(edges))
        rows = [(_fmt(x), _fmt(p)) for x, p in zip(centres, dens)]
        rows.append(("ks", _fmt(ks)))
        _write_csv(out / f"hist_lambda_{tag}.csv", ("x", "p"), rows)
        mode = table.lam[int(np.argmax(table.p_lam))]
        summary.append(
            (tag, json.dumps(sampler.to_dict(), sort_keys=True), _fmt(mode), _fmt(table.integral_lambda()),
             _fmt(table.integral_time()), _fmt(ks), sec.mc_samples, sec.seed)
        )
        log.info("%s: lambda mode %.3f, KS %.5f", tag, mode, ks)
    return _write_csv(
        out / "samplers.csv",
        ("sampler", "params", "lambda_mode", "integral_lambda", "integral_time", "ks", "n_mc", "seed"),
        summary,
    )


def cmd_pretrain(cfg: RunConfig) -> Path:
    """Train the base denoiser on the toy corpus; writes base.snrf and the loss trace."""
    out = Path(cfg.out_dir)
    arch = build_arch(cfg.arch)
    tcfg = build_train(cfg.pretrain, with_lora=False)
    corpus = toy_corpus(cfg.data.per_pair, cfg.data.seed, tuple(cfg.data.held_out))
    params, trace = pretrain(corpus, arch, tcfg, log_every=max(1, tcfg.steps // 10))
    _write_csv(out / "pretrain_loss.csv", ("step", "loss"), _loss_rows(trace))
    path = ckpt_io.save_params(out / "base.snrf", params, seed=tcfg.seed, config=cfg.to_dict())
    log.info("wrote %s", path)
    return path


def cmd_finetune(cfg: RunConfig) -> Path:
    """Fit a LoRA adapter to the reference style; writes adapter.snrf and the loss trace."""
    out = Path(cfg.out_dir)
    arch = build_arch(cfg.arch)
    params, _ = ckpt_io.load_params(_require(cfg.base, "base"), arch)
    tcfg = build_train(cfg.finetune, with_lora=True)
    ref = reference_set(cfg.data.reference_style, cfg.data.reference_per_pair, cfg.data.reference_seed)
    adapter, trace = finetune(params, ref, tcfg, log_every=max(1, tcfg.steps // 10))
    _write_csv(out / "finetune_loss.csv", ("step", "loss"), _loss_rows(trace))
    path = ckpt_io.save_adapter(out / "adapter.snrf", adapter, arch, seed=tcfg.seed, config=cfg.to_dict())
    log.info("wrote %s", path)
    return path


def cmd_sample(cfg: RunConfig) -> Path:
    """Generate images for one style, with PNG sidecars and a metrics row."""
    out = Path(cfg.out_dir)
    params, adapter = _load_models(cfg)
    gen = build_generation(cfg.generation)
    sec = cfg.sample
    cond = grid_conditions(sec.contents, sec.style, sec.per_content)
    x = euler_sample(params, cond, gen, adapter=adapter)
    for i, img in enumerate(x):
        c, s = int(cond.content[i]), int(cond.style[i])
        sidecar = {"index": i, "content": c, "style": s, "generation": gen.to_dict(), "seed": gen.seed,
                   "base": cfg.base, "adapter": cfg.adapter}
        _write_png(out / "samples" / f"{i:04d}_c{c}_s{s}.png", img, sidecar)
    rows = [(sec.style, " ".join(map(str, sec.contents)), len(x), gen.seed, _fmt(style_score(x, STYLES[sec.style])),
             _fmt(mean_content_score(x, cond)))]
    return _write_csv(out / "metrics.csv", ("style", "contents", "n", "seed", "style_score", "content_score"), rows)


def cmd_switch(cfg: RunConfig) -> Path:
    """Style slot empty for the first fraction of steps, set afterwards."""
    out = Path(cfg.out_dir)
    params, adapter = _load_models(cfg)
    base_gen = build_generation(cfg.generation)
    sec = cfg.switch
    rows = []
    for seed in sec.seeds:
        gen = dataclasses.replace(base_gen, seed=base_gen.seed + seed)
        for style in sec.styles:
            grid = switch_grid(params, style, sec.fractions, gen, sec.per_content, adapter)
            for f, res in grid.items():
                name = f"switch_s{style}_f{f:g}_seed{gen.seed}.png"
                sidecar = {"style": style, "switch_fraction": f, "early_steps": int(np.ceil(round(f * gen.steps, 9))),
                           "n": len(res.images), "generation": gen.to_dict(), "seed": gen.seed}
                _write_png(out / "switch" / name, _contact_sheet(res.images), sidecar)
                rows.append((style, _fmt(f), gen.seed, len(res.images), _fmt(res.style_score), _fmt(res.content_score)))
    return _write_csv(out / "switch_metrics.csv", ("style", "fraction", "seed", "n", "style_score", "content_score"), rows)


def ablation_cells(sec: AblateSection) -> list[tuple[float, float, int, int]]:
    cells = [(mu, sg, r, s) for mu in sec.mu for sg in sec.sigma for r in sec.rank for s in sec.seeds]
    if sec.cells is not None:
        cells = [cells[i] for i in sec.cells]
    return cells


def cmd_ablate(cfg: RunConfig) -> Path:
    """Fine-tune, sample and score every (mu, sigma, rank, seed) cell independently."""
    out = Path(cfg.out_dir)
    arch = build_arch(cfg.arch)
    params, _ = ckpt_io.load_params(_require(cfg.base, "base"), arch)
    tcfg = build_train(cfg.finetune, with_lora=True)
    gen = build_generation(cfg.generation)
    style = cfg.data.reference_style
    ref = reference_set(style, cfg.data.reference_per_pair, cfg.data.reference_seed)
    rows = []
    for mu, sigma, rank, seed in ablation_cells(cfg.ablate):
        res = finetune_and_score(
            params, StyleFriendly(mu, sigma), seed=seed, rank=rank, offset_noise=tcfg.offset.scale, style_id=style,
            base_cfg=tcfg, gen=gen, per_content=cfg.ablate.per_content, reference=ref,
        )
        log.info("mu=%g sigma=%g rank=%d seed=%d: style %.3f", mu, sigma, rank, seed, res.style_score)
        rows.append((_fmt(mu), _fmt(sigma), rank, seed, _fmt(res.trace[-1]), _fmt(res.style_score),
                     _fmt(res.content_score), f"{res.wall_time:.3f}"))
    header = ("mu", "sigma", "rank", "seed", "final_loss", "style_score", "content_score", "wall_time_s")
    return _write_csv(out / "ablation.csv", header, rows)


COMMANDS = {
    "analyze-sampler": cmd_analyze_sampler,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "switch": cmd_switch,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snrlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.add_argument("--base", help="base checkpoint (.snrf)")
        p.add_argument("--adapter", help="adapter checkpoint (.snrf)")
        p.add_argument("--seed", type=int, help="seed for this command's training or generation")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. finetune.lr=1e-4 (value parsed as JSON when possible)")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


_SEED_KEY = {
    "analyze-sampler": "analyze.seed",
    "pretrain": "pretrain.seed",
    "finetune": "finetune.seed",
    "sample": "generation.seed",
    "switch": "generation.seed",
    "ablate": "generation.seed",
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = list(args.overrides)
    for key in ("out_dir", "base", "adapter"):
        if getattr(args, key) is not None:
            overrides.append(f"{key}={json.dumps(getattr(args, key))}")
    if args.seed is not None:
        overrides.append(f"{_SEED_KEY[args.command]}={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        if args.dump_config:
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        path = COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointFormatError, FileNotFoundError, DivergenceError, KeyError, ValueError) as e:
        print(f"snrlab {args.command}: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"snrlab {args.command}: I/O error on {e.filename}: {e.strerror}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
