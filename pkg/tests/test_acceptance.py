"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Run on its own with ``python3 -m pytest tests/test_acceptance.py -s`` (or
``python3 tests/test_acceptance.py``). The lines are also repeated in the
pytest terminal summary.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from _fd import fd_grad, rel_error
from scipy import stats

from snrlab.cli import main as cli_main
from snrlab.diffusion import DcoConfig, NoisyBatch, dco_loss, direct_loss, dm_loss, importance_weighted_loss
from snrlab.experiments import TOY_ARCH, TOY_FINETUNE, TOY_GENERATION, finetune_and_score, reference_set, switch_grid
from snrlab.lora import adapted_forward, attach, merge
from snrlab.net import NULL_ID, Architecture, Cond, forward, init_params
from snrlab.samplers import EdmLogNormal, LogitNormal, StyleFriendly, UniformTime, emit_density_table
from snrlab.schedule import log_snr, shift_log_snr, shift_time, time_of_log_snr
from snrlab.train import LoraConfig, finetune

RESULTS: list[str] = []
SAMPLERS = [UniformTime(), LogitNormal(), StyleFriendly(), EdmLogNormal()]
SEEDS = (0, 1, 2)


def report(number: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_c01_schedule_exactness():
    with Timer() as clock:
        t = np.linspace(0.005, 0.995, 100)[:, None]
        k = np.geomspace(0.1, 10.0, 20)[None, :]
        shift_err = np.max(np.abs(time_of_log_snr(shift_log_snr(log_snr(t), k)) - shift_time(t, k)))
        grid = np.linspace(0.001, 0.999, 1000)
        trip_err = np.max(np.abs(time_of_log_snr(log_snr(grid)) - grid))
    ok = shift_err < 1e-12 and trip_err < 1e-12 and clock.elapsed < 1.0
    report(1, "schedule exactness", ok,
           f"shift equivalence err {shift_err:.1e}, round-trip err {trip_err:.1e}, {clock.elapsed:.2f}s")


def test_c02_sampler_correctness():
    with Timer() as clock:
        ks = {}
        for i, s in enumerate(SAMPLERS):
            lam, _ = s.sample(np.random.default_rng(100 + i), 1_000_000)
            ks[type(s).__name__] = stats.kstest(lam, s.cdf_lambda).statistic
        edge = log_snr(0.8)  # t >= 0.8  <=>  lambda <= edge
        sf_mass = StyleFriendly().mass(-math.inf, edge)
        ln_mass = LogitNormal().mass(-math.inf, edge)
        _, t_sf = StyleFriendly().sample(np.random.default_rng(7), 1_000_000)
        _, t_ln = LogitNormal().sample(np.random.default_rng(8), 1_000_000)
        mc_sf, mc_ln = np.mean(t_sf >= 0.8), np.mean(t_ln >= 0.8)
    ok = (
        max(ks.values()) < 0.005
        and abs(sf_mass - 0.947) <= 0.002 and abs(mc_sf - 0.947) <= 0.002
        and abs(ln_mass - 0.083) <= 0.002 and abs(mc_ln - 0.083) <= 0.002
        and clock.elapsed < 10.0
    )
    ks_txt = ", ".join(f"{k} {v:.4f}" for k, v in ks.items())
    report(2, "sampler correctness", ok,
           f"KS [{ks_txt}]; mass t in [0.8,1]: style-friendly {sf_mass:.4f} (MC {mc_sf:.4f}), "
           f"logit-normal {ln_mass:.4f} (MC {mc_ln:.4f}); {clock.elapsed:.1f}s")


def _chi2_pvalue(samples, centres, density, step, n_bins=50, lo=None, hi=None):
    """Histogram of ``samples`` against bin masses summed from a density table."""
    lo = centres[0] - step / 2 if lo is None else lo
    hi = centres[-1] + step / 2 if hi is None else hi
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, centres, side="right") - 1, 0, n_bins - 1)
    mass = np.bincount(which, weights=density * step, minlength=n_bins)
    inside = (samples >= lo) & (samples < hi)
    observed = np.histogram(samples[inside], bins=edges)[0].astype(float)
    # fold the out-of-range remainder into one extra cell
    observed = np.append(observed, (~inside).sum())
    mass = np.append(mass, max(1.0 - mass.sum(), 0.0))
    expected = mass * len(samples)
    keep = expected >= 5
    obs, exp = observed[keep], expected[keep]
    exp *= obs.sum() / exp.sum()
    return stats.chisquare(obs, exp).pvalue


def test_c03_density_tables(tmp_path):
    with Timer() as clock:
        lines, ok = [], True
        for i, s in enumerate(SAMPLERS):
            table = emit_density_table(s, 40_000, (-40.0, 40.0))
            il, it = table.integral_lambda(), table.integral_time()
            lam, t = s.sample(np.random.default_rng(200 + i), 100_000)
            p_lam = _chi2_pvalue(lam, table.lam, table.p_lam, table.lam_step, lo=-20.0, hi=20.0)
            p_t = _chi2_pvalue(t, table.t, table.p_t, table.t_step, lo=0.0, hi=1.0)
            ok &= abs(il - 1) <= 1e-6 and abs(it - 1) <= 1e-6 and p_lam > 0.01 and p_t > 0.01
            lines.append(f"{type(s).__name__} int {il - 1:+.1e}/{it - 1:+.1e} p {p_lam:.2f}/{p_t:.2f}")
        # the tables the CLI writes with its default config
        out = Path(tmp_path) / "analyze"
        ok &= cli_main(["analyze-sampler", "--out", str(out)]) == 0
        for name in sorted(out.glob("density_*.csv")):
            x, p = np.loadtxt(name, delimiter=",", skiprows=1, unpack=True)
            ok &= abs(p.sum() * (x[1] - x[0]) - 1) <= 1e-6
        lines.append(f"cli tables {len(list(out.glob('density_*.csv')))} files")
    ok &= clock.elapsed < 10.0
    report(3, "density tables", ok, "; ".join(lines) + f"; {clock.elapsed:.1f}s")


def test_c04_loss_identity():
    with Timer() as clock:
        params = init_params(TOY_ARCH, np.random.default_rng(0))
        x0 = reference_set().images[0]
        cond = Cond.of(0, 5)
        lines, ok = [], True
        for i, s in enumerate((LogitNormal(), StyleFriendly())):
            a, sa = direct_loss(params, x0, cond, s, np.random.default_rng(10 + i), 100_000, return_stderr=True)
            b, sb = importance_weighted_loss(params, x0, cond, s, np.random.default_rng(20 + i), 100_000,
                                             return_stderr=True)
            z = abs(a - b) / math.hypot(sa, sb)
            ok &= z < 3
            lines.append(f"{type(s).__name__} {a:.4f} vs {b:.4f} ({z:.2f} SE)")
    ok &= clock.elapsed < 30.0
    report(4, "loss identity", ok, "; ".join(lines) + f"; {clock.elapsed:.1f}s")


def _gradient_blocks(params, adapter, batch, cond, rng_entries):
    """Largest relative FD error per loss over every parameter and adapter block."""
    arrays = dict(params.tensors)
    arrays.update({f"{n}.lora_{s}": adapter.pairs[n]["AB".index(s)] for n in adapter.targets for s in "AB"})
    phi = params.copy()
    worst = {}
    losses = {
        "dm": lambda: dm_loss(params, batch, cond, adapter=adapter, wrt="both"),
        "dco": lambda: dco_loss(params, phi, batch, cond, DcoConfig(), adapter=adapter, wrt="both"),
    }
    for key, fn in losses.items():
        _, grads = fn()
        assert set(grads) == set(arrays)
        errs = [rel_error(g, fd_grad(lambda: fn()[0], arrays[name], h=1e-4, max_entries=rng_entries))
                for name, g in grads.items()]
        worst[key] = max(errs)
    return worst


def test_c05_gradient_correctness():
    with Timer() as clock:
        worst = {}
        archs = {
            "tiny": (Architecture(2, 3, (3, 4, 4), (8, 8), 4, 3, 5), None),
            "toy": (TOY_ARCH, 12),
        }
        for label, (arch, entries) in archs.items():
            rng = np.random.default_rng(1)
            params = init_params(arch, rng, np.float64)
            adapter = attach(params, "all", rank=2, rng=rng)
            for _, b in adapter.pairs.values():
                b[:] = rng.normal(0, 0.05, b.shape)
            x0 = rng.uniform(-1, 1, (3,) + arch.image_shape)
            batch = NoisyBatch.build(x0, rng.standard_normal(x0.shape), lam=np.array([-6.0, 0.0, 3.0]))
            cond = Cond(np.array([0, 1, NULL_ID]), np.array([2, NULL_ID, NULL_ID]))
            # the non-zero adapter makes theta differ from phi, so DCO weights are not all 1/2
            for key, err in _gradient_blocks(params, adapter, batch, cond, entries).items():
                worst[f"{label}/{key}"] = err
    ok = max(worst.values()) < 1e-4 and clock.elapsed < 60.0
    report(5, "gradient correctness", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (max rel err per block); {clock.elapsed:.1f}s")


def test_c06_lora_algebra():
    with Timer() as clock:
        rng = np.random.default_rng(2)
        base = init_params(TOY_ARCH, rng)
        x = rng.standard_normal((100,) + TOY_ARCH.image_shape)
        t = rng.uniform(0, 1, 100)
        cond = Cond.of(rng.integers(0, 4, 100), rng.integers(0, 6, 100))
        ad = attach(base, rng=rng)
        noop = float(np.max(np.abs(adapted_forward(base, ad, x, t, cond) - forward(base, x, t, cond))))

        base64 = base.astype(np.float64)
        ad64 = attach(base64, "all", rank=32, rng=rng)
        for _, b in ad64.pairs.values():
            b[:] = rng.normal(0, 0.01, b.shape)
        merge_diff = float(np.max(np.abs(forward(merge(base64, ad64), x, t, cond) - adapted_forward(base64, ad64, x, t, cond))))

        snapshot = {k: v.tobytes() for k, v in base.tensors.items()}
        finetune(base, reference_set(), replace(TOY_FINETUNE, lora=LoraConfig(rank=32)))
        frozen = all(base.tensors[k].tobytes() == v for k, v in snapshot.items())
    ok = noop == 0.0 and merge_diff < 1e-6 and frozen and clock.elapsed < 60.0
    report(6, "LoRA algebra", ok,
           f"zero-init diff {noop:.1e}, merge diff {merge_diff:.1e}, base byte-identical after 300 steps: {frozen}; "
           f"{clock.elapsed:.1f}s")


def test_c07_dco_sanity(pretrained):
    params, _ = pretrained
    with Timer() as clock:
        ref = reference_set()
        rng = np.random.default_rng(3)
        batch = NoisyBatch.build(ref.images[:4], rng.standard_normal(ref.images[:4].shape), lam=np.array([-6, -2, 0, 2.0]))
        initial, _ = dco_loss(params, params, batch, Cond(ref.content_ids[:4], ref.style_ids[:4]))
        cfg = replace(TOY_FINETUNE, objective="dco", beta_T=1.0, sampler=StyleFriendly())
        _, trace = finetune(params, ref, cfg)
        first, final = trace[0], float(np.mean(trace[-50:]))
    ok = abs(initial - math.log(2)) <= 1e-6 and abs(first - math.log(2)) <= 1e-6 and final < first
    ok &= clock.elapsed < 120.0
    report(7, "DCO sanity", ok,
           f"theta=phi loss {initial:.9f} (ln 2 = {math.log(2):.9f}), first step {first:.9f}, "
           f"final (last 50 steps) {final:.4f}; {clock.elapsed:.1f}s")


def test_c08_style_emergence(pretrained):
    params, _ = pretrained
    with Timer() as clock:
        scores = {0.0: [], 0.1: [], 1.0: []}
        n = 0
        for seed in SEEDS:
            gen = replace(TOY_GENERATION, seed=TOY_GENERATION.seed + seed)
            for style in range(5):
                grid = switch_grid(params, style, (0.0, 0.1, 1.0), gen, per_content=16)
                for f, res in grid.items():
                    scores[f].append(res.style_score)
                n += len(grid[0.0].images)
        full, switched, free = (float(np.mean(scores[f])) for f in (0.0, 0.1, 1.0))
    ok = abs(switched - free) < abs(switched - full) and n // len(SEEDS) >= 64 and clock.elapsed < 300.0
    report(8, "style emergence", ok,
           f"style_score full {full:.3f}, style absent for first 10% {switched:.3f}, style-free {free:.3f} "
           f"({n // len(SEEDS)} samples x {len(SEEDS)} seeds); {clock.elapsed:.1f}s")


@pytest.fixture(scope="module")
def finetune_runs(pretrained):
    """Style scores of held-out-style fine-tunes, keyed (label, seed), plus wall time."""
    params, _ = pretrained
    variants = {
        "sf_r32": (StyleFriendly(-6.0, 2.0), 32, 0.0),
        "ln_r32": (LogitNormal(0.0, 1.0), 32, 0.0),
        "sf_r4": (StyleFriendly(-6.0, 2.0), 4, 0.0),
        "mu-2": (StyleFriendly(-2.0, 2.0), 32, 0.0),
        "mu0": (StyleFriendly(0.0, 2.0), 32, 0.0),
        "ln_off": (LogitNormal(0.0, 1.0), 32, 0.1),
    }
    out, times = {}, {}
    for label, (sampler, rank, offset) in variants.items():
        times[label] = 0.0
        for seed in SEEDS:
            res = finetune_and_score(params, sampler, seed, rank=rank, offset_noise=offset)
            out[label, seed] = res.style_score
            times[label] += res.wall_time
    return out, times


def test_c09_main_claim(finetune_runs):
    s, times = finetune_runs
    elapsed = sum(times[k] for k in ("sf_r32", "ln_r32", "sf_r4", "mu-2", "mu0"))
    beats = sum(s["sf_r32", i] > s["ln_r32", i] for i in SEEDS)
    low_rank = sum(s["sf_r4", i] > s["ln_r32", i] for i in SEEDS)
    monotone = sum(s["sf_r32", i] > s["mu-2", i] > s["mu0", i] for i in SEEDS)
    ok = beats == 3 and low_rank >= 2 and monotone == 3 and elapsed < 900.0

    def col(k):
        return "/".join(f"{s[k, i]:.3f}" for i in SEEDS)

    report(9, "main claim", ok,
           f"per seed: mu=-6 r32 {col('sf_r32')}, logit-normal r32 {col('ln_r32')}, mu=-6 r4 {col('sf_r4')}, "
           f"mu=-2 {col('mu-2')}, mu=0 {col('mu0')}; wins {beats}/3, r4 wins {low_rank}/3, "
           f"monotone {monotone}/3; {elapsed:.0f}s")


def test_c10_offset_noise_baseline(finetune_runs):
    s, times = finetune_runs
    elapsed = sum(times[k] for k in ("sf_r32", "ln_r32", "ln_off"))
    wins = sum(s["ln_r32", i] < s["ln_off", i] < s["sf_r32", i] for i in SEEDS)
    ok = wins >= 2 and elapsed < 900.0
    col = lambda k: "/".join(f"{s[k, i]:.3f}" for i in SEEDS)  # noqa: E731
    report(10, "offset-noise baseline", ok,
           f"per seed: logit-normal {col('ln_r32')}, +offset 0.1 {col('ln_off')}, mu=-6 {col('sf_r32')}; "
           f"ordered in {wins}/3 seeds; {elapsed:.0f}s")


def _tree_bytes(root: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "ablation.csv":
                # wall time is the one column that is not a function of the config
                data = b"\n".join(b",".join(line.split(b",")[:-1]) for line in data.splitlines())
            out[str(p.relative_to(root))] = data
    return out


def test_c11_determinism(tmp_path):
    small = {
        "arch": {"hidden_widths": [64, 64]},
        "pretrain": {"steps": 40, "batch_size": 8},
        "finetune": {"steps": 10},
        "sample": {"per_content": 2},
        "switch": {"styles": [0, 3], "seeds": [0, 1], "per_content": 2},
        "analyze": {"mc_samples": 20_000, "grid": 500},
        "ablate": {"mu": [0.0, -6.0], "sigma": [2.0], "rank": [4], "seeds": [0], "per_content": 2},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(small))
    trees = []
    for run in ("a", "b"):
        root = tmp_path / run
        base, adapter = root / "pre" / "base.snrf", root / "ft" / "adapter.snrf"
        commands = [
            ["analyze-sampler", "--out", str(root / "an")],
            ["pretrain", "--out", str(root / "pre")],
            ["finetune", "--out", str(root / "ft"), "--base", str(base)],
            ["sample", "--out", str(root / "smp"), "--base", str(base), "--adapter", str(adapter)],
            ["switch", "--out", str(root / "sw"), "--base", str(base)],
            ["ablate", "--out", str(root / "abl"), "--base", str(base)],
        ]
        for argv in commands:
            assert cli_main(argv[:1] + ["--config", str(cfg)] + argv[1:]) == 0
        # absolute paths differ between the two runs; compare the rest
        trees.append({k: v.replace(str(root).encode(), b"<run>") for k, v in _tree_bytes(root).items()})
    same = trees[0] == trees[1]
    n_files = len(trees[0])
    differing = sorted(k for k in trees[0] if trees[0][k] != trees[1].get(k))
    report(11, "determinism", same and n_files > 0,
           f"{n_files} output files from 6 commands compared byte-for-byte; differing: {differing or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
