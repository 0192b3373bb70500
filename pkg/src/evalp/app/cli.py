"""Command-line interface and experiment drivers.

Subcommands: train-vae, train-prior, sample, eval, sweep-kl. Outputs are
CSV histories/grids, JSON summaries, and binary checkpoints. Exit codes:
2 config error, 3 training divergence, 4 bad or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ..data import make_dataset
from ..diffcore import Tensor, no_grad
from ..errors import CheckpointError, ConfigError, EvalpError, TrainingDivergedError
from ..gauss import standard_normal_logpdf
from ..metrics import GridSpec, default_grid, density_grid, frechet_gaussian, mmd_rbf, quadrature_log_z
from ..models import VaeModel
from ..rng import Rng
from ..sampling import SirConfig, generate, sample_fast, sample_sir_batch
from ..stage1 import aggregate_posterior_sample, train_vae
from ..stage2 import (
    Stage2Config,
    log_z_variational_estimate,
    train_latent_flow_baseline,
    train_nce_ratio_baseline,
    train_prior,
)
from .checkpoint import (
    load_energy,
    load_flow,
    load_vae,
    save_checkpoint,
    save_energy,
    save_flow,
    save_vae,
)
from .config import RunConfig, config_hash, load_config

EXPORT_GRID_POINTS = 101


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(cfg: RunConfig, section: str):
    value = getattr(cfg, section)
    if value is None:
        raise ConfigError(f"config section '{section}' is required for this command")
    return value


def _build_dataset(cfg: RunConfig):
    seed = cfg.derived_seeds()["dataset"]
    return make_dataset(cfg.dataset.name, cfg.dataset.n, seed, cfg.dataset.params)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def run_train_vae(cfg: RunConfig, out: Path) -> dict:
    stage1 = _require(cfg, "stage1")
    out.mkdir(parents=True, exist_ok=True)
    dataset = _build_dataset(cfg)
    start = time.perf_counter()
    try:
        model, history = train_vae(dataset.samples, stage1)
    except TrainingDivergedError as e:
        if e.last_good is not None:
            save_checkpoint(
                str(out / "vae_lastgood.ckpt"),
                "vae",
                e.last_good,
                {"arch": {}, "train": vars(stage1)},
                stage1.seed,
            )
        raise
    wall = time.perf_counter() - start
    save_vae(str(out / "vae.ckpt"), model, stage1.seed, train_config=_plain(stage1))
    _write_csv(
        out / "stage1_history.csv",
        ["epoch", "total", "recon", "kl"],
        [[h["epoch"], h["total"], h["recon"], h["kl"]] for h in history],
    )
    summary = {
        "command": "train-vae",
        "final_total": history[-1]["total"],
        "final_recon": history[-1]["recon"],
        "final_kl": history[-1]["kl"],
        "epochs": stage1.epochs,
        "seed": stage1.seed,
        "config_hash": config_hash(_plain(stage1)),
        "wall_seconds": wall,
    }
    _write_json(out / "train_vae_summary.json", summary)
    return summary


def _export_density_grids(out: Path, vae, f, g, data, seeds):
    grid = GridSpec((-4.0, -4.0), (4.0, 4.0), EXPORT_GRID_POINTS)
    quad = quadrature_log_z(f, default_grid(2))

    def energy_logpdf(z):
        with no_grad():
            fv = f(Tensor(z)).data[:, 0]
        return -fv + standard_normal_logpdf(Tensor(z)).data - quad

    def flow_logpdf(z):
        with no_grad():
            return g.log_pdf(Tensor(z)).data

    def base_logpdf(z):
        return standard_normal_logpdf(Tensor(z)).data

    q_samples = aggregate_posterior_sample(vae, data, 2000, seeds["sir"])
    bw = max(1e-3, float(q_samples.std()) * len(q_samples) ** (-1.0 / 6.0))

    def qagg_kde(z):
        d2 = ((z[:, None, :] - q_samples[None, :, :]) ** 2).sum(axis=2)
        return logsumexp(-d2 / (2 * bw**2), axis=1) - np.log(len(q_samples)) - np.log(
            2 * np.pi * bw**2
        )

    names = {
        "grid_base_prior.csv": base_logpdf,
        "grid_tilted_prior.csv": energy_logpdf,
        "grid_flow_density.csv": flow_logpdf,
        "grid_qagg_kde.csv": qagg_kde,
    }
    for fname, fn in names.items():
        vals, xs, ys = density_grid(fn, grid)
        rows = []
        for i, xv in enumerate(xs):
            for j, yv in enumerate(ys):
                rows.append([xv, yv, vals[i, j]])
        _write_csv(out / fname, ["x", "y", "log_density"], rows)
    return sorted(names)


def run_train_prior(cfg: RunConfig, out: Path, vae_path: str) -> dict:
    stage2 = _require(cfg, "stage2")
    out.mkdir(parents=True, exist_ok=True)
    vae = load_vae(vae_path)
    dataset = _build_dataset(cfg)
    start = time.perf_counter()
    f, g, history = train_prior(vae, dataset.samples, stage2)
    wall = time.perf_counter() - start
    save_energy(str(out / "energy.ckpt"), f, stage2.seed, train_config=_plain(stage2))
    save_flow(str(out / "flow.ckpt"), g, stage2.seed, train_config=_plain(stage2))
    _write_csv(
        out / "stage2_history.csv",
        ["iter", "e_q_f", "e_g_f", "kl_g_p0", "gp", "upper", "lower", "logz_est"],
        [
            [i, r.e_q_f, r.e_g_f, r.kl_g_p0, r.gp, r.upper, r.lower, r.logz_est]
            for i, r in enumerate(history.rows)
        ],
    )
    grids = []
    if vae.nz == 2:
        grids = _export_density_grids(out, vae, f, g, dataset.samples, cfg.derived_seeds())
    summary = {
        "command": "train-prior",
        "critic_updates": history.critic_updates,
        "sampler_updates": history.sampler_updates,
        "final_upper": history.rows[-1].upper,
        "final_lower": history.rows[-1].lower,
        "final_logz_est": history.rows[-1].logz_est,
        "density_grids": grids,
        "seed": stage2.seed,
        "config_hash": config_hash(_plain(stage2)),
        "wall_seconds": wall,
    }
    _write_json(out / "train_prior_summary.json", summary)
    return summary


def _load_models(vae_path, energy_path, flow_path):
    vae = load_vae(vae_path)
    f = load_energy(energy_path)
    g = load_flow(flow_path)
    if not (vae.nz == f.nz == g.nz):
        raise CheckpointError(
            f"latent width mismatch: vae nz={vae.nz}, energy nz={f.nz}, flow nz={g.nz}"
        )
    return vae, f, g


def run_sample(cfg: RunConfig, out: Path, vae_path, energy_path, flow_path, mode, count) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    vae, f, g = _load_models(vae_path, energy_path, flow_path)
    sir = cfg.sir or SirConfig(seed=cfg.derived_seeds()["sir"])
    start = time.perf_counter()
    if mode == "fast":
        latents, counter = sample_fast(g, count, sir.seed)
    else:
        latents, counter = sample_sir_batch(f, g, sir, count)
    wall = time.perf_counter() - start
    decoded = generate(vae, latents)
    _write_csv(out / "latents.csv", [f"z{i}" for i in range(g.nz)], latents.tolist())
    _write_csv(out / "samples.csv", [f"x{i}" for i in range(decoded.shape[1])], decoded.tolist())
    report = {
        "command": "sample",
        "mode": mode,
        "count": count,
        "nfe_fp": counter.fp,
        "nfe_bp": counter.bp,
        "nfe_fp_flow": counter.fp_flow,
        "nfe_fp_energy": counter.fp_energy,
        "seconds_per_sample": wall / max(1, count),
        "wall_seconds": wall,
        "seed": sir.seed,
        "proposals": sir.proposals if mode == "sir" else None,
        "normalizer_samples": sir.normalizer_samples if mode == "sir" else None,
    }
    _write_json(out / "sample_report.json", report)
    return report


def run_eval(cfg: RunConfig, out: Path, vae_path, energy_path, flow_path, n_eval=1000) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    vae, f, g = _load_models(vae_path, energy_path, flow_path)
    dataset = _build_dataset(cfg)
    seeds = cfg.derived_seeds()
    sir = cfg.sir or SirConfig(seed=seeds["sir"])
    rng = Rng(seeds["sir"])

    q_agg = aggregate_posterior_sample(vae, dataset.samples, n_eval, rng.spawn())
    base = rng.normal((n_eval, vae.nz))
    flow_samples, _ = sample_fast(g, n_eval, rng.spawn())
    sir_cfg = SirConfig(
        proposals=sir.proposals,
        normalizer_samples=sir.normalizer_samples,
        seed=rng.seed_int(),
        weight_mode=sir.weight_mode,
    )
    sir_samples, _ = sample_sir_batch(f, g, sir_cfg, n_eval)

    data_ref = dataset.samples[
        rng.integers(0, len(dataset.samples), min(n_eval, len(dataset.samples)))
    ]
    report = {
        "command": "eval",
        "n_eval": n_eval,
        "mmd_base": mmd_rbf(q_agg, base),
        "mmd_evalp": mmd_rbf(q_agg, flow_samples),
        "mmd_evalp_sir": mmd_rbf(q_agg, sir_samples),
        "frechet_base": frechet_gaussian(data_ref, generate(vae, base)),
        "frechet_evalp": frechet_gaussian(data_ref, generate(vae, flow_samples)),
        "frechet_evalp_sir": frechet_gaussian(data_ref, generate(vae, sir_samples)),
        "logz_variational": None,
        "logz_quadrature": None,
        "logz_gap": None,
        "seed": cfg.seed,
        "config_hash": config_hash({"seed": cfg.seed, "dataset": vars(cfg.dataset)}),
    }
    if vae.nz <= 3:
        est = log_z_variational_estimate(f, g, 4096, rng.seed_int())
        quad = quadrature_log_z(f, default_grid(vae.nz))
        report["logz_variational"] = est
        report["logz_quadrature"] = quad
        report["logz_gap"] = abs(est - quad)
    _write_json(out / "eval_report.json", report)
    return report


# ---------------------------------------------------------------------------
# KL-weight sweep
# ---------------------------------------------------------------------------


def _nce_sir_sample(clf, count, proposals, seed):
    """SIR over N(0, I) proposals with weights proportional to exp(logit)."""
    rng = Rng(seed)
    out = np.zeros((count, clf.nz))
    for i in range(count):
        z = rng.normal((proposals, clf.nz))
        with no_grad():
            logit = clf(Tensor(z)).data[:, 0]
        logw = logit - logsumexp(logit)
        cdf = np.cumsum(np.exp(logw))
        u = rng.uniform(())
        pick = int((cdf < u).sum().clip(0, proposals - 1))
        out[i] = z[pick]
    return out


def run_sweep_cell(args) -> dict:
    """One (kl_weight, seed) cell of the sweep; returns a CSV row dict."""
    cfg, kl_weight, seed, eval_samples = args
    row = {
        "kl_weight": kl_weight,
        "seed": seed,
        "fid_proxy_vae": float("nan"),
        "fid_proxy_evalp": float("nan"),
        "fid_proxy_nce": float("nan"),
        "mmd_stage1": float("nan"),
        "error": "",
    }
    try:
        cell_cfg = RunConfig(
            seed=seed,
            dataset=cfg.dataset,
            stage1=None,
            stage2=None,
        )
        seeds = cell_cfg.derived_seeds()
        stage1 = _clone(cfg.stage1, kl_weight=kl_weight, seed=seeds["stage1"])
        stage2 = _clone(cfg.stage2, seed=seeds["stage2"])
        dataset = make_dataset(cfg.dataset.name, cfg.dataset.n, seeds["dataset"], cfg.dataset.params)

        vae, _ = train_vae(dataset.samples, stage1)
        f, g, _ = train_prior(vae, dataset.samples, stage2)
        clf, _ = train_nce_ratio_baseline(vae, dataset.samples, stage2)

        rng = Rng(seeds["sir"])
        data_ref = dataset.samples[
            rng.integers(0, len(dataset.samples), min(eval_samples, len(dataset.samples)))
        ]
        base = rng.normal((eval_samples, vae.nz))
        flow_samples, _ = sample_fast(g, eval_samples, rng.spawn())
        nce_samples = _nce_sir_sample(clf, eval_samples, 500, rng.seed_int())
        q_agg = aggregate_posterior_sample(vae, dataset.samples, eval_samples, rng.spawn())

        row["fid_proxy_vae"] = frechet_gaussian(data_ref, generate(vae, base))
        row["fid_proxy_evalp"] = frechet_gaussian(data_ref, generate(vae, flow_samples))
        row["fid_proxy_nce"] = frechet_gaussian(data_ref, generate(vae, nce_samples))
        row["mmd_stage1"] = mmd_rbf(q_agg, rng.normal((eval_samples, vae.nz)))
    except EvalpError as e:
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def run_sweep_kl(cfg: RunConfig, out: Path, threads: int = 1) -> list[dict]:
    stage1 = _require(cfg, "stage1")
    _require(cfg, "stage2")
    sweep = cfg.sweep
    if sweep is None or len(sweep.kl_weights) < 2:
        raise ConfigError("sweep-kl needs a 'sweep' section with at least 2 kl_weights")
    out.mkdir(parents=True, exist_ok=True)
    cells = [
        (cfg, w, cfg.seed + i, sweep.eval_samples)
        for w in sweep.kl_weights
        for i in range(sweep.n_seeds)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_sweep_cell, cells))
    else:
        rows = [run_sweep_cell(c) for c in cells]
    header = ["kl_weight", "seed", "fid_proxy_vae", "fid_proxy_evalp", "fid_proxy_nce", "mmd_stage1", "error"]
    _write_csv(out / "sweep_kl.csv", header, [[r[h] for h in header] for r in rows])
    return rows


def _plain(cfg_obj) -> dict:
    doc = dict(vars(cfg_obj))
    for k, v in doc.items():
        if isinstance(v, tuple):
            doc[k] = list(v)
    return doc


def _clone(cfg_obj, **overrides):
    doc = dict(vars(cfg_obj))
    doc.update(overrides)
    return type(cfg_obj)(**doc)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evalp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoints=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="parallel sweep workers")
        if checkpoints:
            p.add_argument("--vae", required=True, help="stage-1 checkpoint path")

    common(sub.add_parser("train-vae", help="stage 1: train the VAE"))
    common(sub.add_parser("train-prior", help="stage 2: learn the tilted prior"), checkpoints=True)

    p = sub.add_parser("sample", help="generate from a trained prior")
    common(p, checkpoints=True)
    p.add_argument("--energy", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--mode", choices=["fast", "sir"], default="fast")
    p.add_argument("--count", type=int, default=1000)

    p = sub.add_parser("eval", help="metric report for a trained pipeline")
    common(p, checkpoints=True)
    p.add_argument("--energy", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--eval-samples", type=int, default=1000)

    common(sub.add_parser("sweep-kl", help="robustness sweep over KL weights"))
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            for section in (cfg.stage1, cfg.stage2, cfg.sir):
                if section is not None:
                    section.seed = cfg.derived_seeds()[
                        {"Stage1Config": "stage1", "Stage2Config": "stage2", "SirConfig": "sir"}[
                            type(section).__name__
                        ]
                    ]
        out = Path(args.out or cfg.out_dir or "evalp_out")
        if args.command == "train-vae":
            run_train_vae(cfg, out)
        elif args.command == "train-prior":
            run_train_prior(cfg, out, args.vae)
        elif args.command == "sample":
            run_sample(cfg, out, args.vae, args.energy, args.flow, args.mode, args.count)
        elif args.command == "eval":
            run_eval(cfg, out, args.vae, args.energy, args.flow, args.eval_samples)
        elif args.command == "sweep-kl":
            run_sweep_kl(cfg, out, threads=args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
