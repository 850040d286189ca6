"""Command-line front door.

Subcommands: train, reflow, generate-pairs, sample, invert, diagnose,
profile-loss.  Every subcommand reads one section of a JSON run config,
writes its artifacts plus a manifest into the output directory, and is
idempotent: identical config and seed reproduce identical bytes.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys


def _preset_threads(argv) -> None:
    # BLAS pools must be capped before numpy is imported, hence this pre-scan
    n = os.environ.get("RFLAB_THREADS")
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv):
            n = argv[idx + 1]
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rflab",
                                     description="rectified-flow laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "reflow", "generate-pairs", "sample", "invert",
                 "diagnose", "profile-loss"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _preset_threads(argv)
    args = build_parser().parse_args(argv)

    from .errors import ConfigError, NumericFailure

    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"rflab: config error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"rflab: numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"rflab: i/o failure: {exc}", file=sys.stderr)
        return 4


def _dispatch(args) -> int:
    from .config import load_config, output_lock

    cfg = load_config(args.config, out_override=args.out,
                      seed_override=args.seed, threads_override=args.threads)
    handler = {
        "train": cmd_train,
        "reflow": cmd_reflow,
        "generate-pairs": cmd_generate_pairs,
        "sample": cmd_sample,
        "invert": cmd_invert,
        "diagnose": cmd_diagnose,
        "profile-loss": cmd_profile_loss,
    }[args.command]
    with output_lock(cfg.out_dir):
        handler(cfg)
    return 0


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _load_field(cfg, path, use_ema: bool):
    from .config import file_digest
    from .nn import load_checkpoint
    from .pipeline import build_field

    params, ema = load_checkpoint(path)
    if use_ema:
        for tensor, shadow in zip(params.tensors(), ema):
            tensor.data = shadow.copy()
    return build_field(params, cfg.model), bytes.fromhex(file_digest(path))


def _coupling_from(cfg, obj, seed):
    from .config import parse_target
    from .errors import ConfigError
    from .pipeline import IndependentCoupling, MixedCoupling, PairedCoupling, load_pairs

    obj = dict(obj)
    kind = obj.pop("kind", "independent")
    if kind == "independent":
        target = parse_target(obj.pop("target")) if "target" in obj else cfg.target
        if target is None:
            raise ConfigError("independent coupling needs a target distribution")
        coupling = IndependentCoupling(target, seed=seed)
    elif kind == "paired":
        ds = load_pairs(obj.pop("path"))
        coupling = PairedCoupling(ds.xs, ds.zs, seed=seed)
    elif kind == "mixed":
        inverted = load_pairs(obj.pop("inverted"))
        synthetic = load_pairs(obj.pop("synthetic")) if obj.get("synthetic") else None
        obj.pop("synthetic", None)
        coupling = MixedCoupling(inverted, float(obj.pop("p", 0.0)), seed=seed,
                                 synthetic=synthetic)
    else:
        raise ConfigError(f"unknown coupling kind {kind!r}")
    if obj:
        raise ConfigError(f"coupling: unknown keys {sorted(obj)}")
    return coupling


def _loss_history_artifacts(out_dir, stem, history):
    from .plots import save_loss_history_figure

    csv_path = out_dir / f"{stem}.csv"
    _write_csv(csv_path, ["iteration", "loss"],
               [(i + 1, f"{v:.17g}") for i, v in enumerate(history)])
    png_path = out_dir / f"{stem}.png"
    save_loss_history_figure(png_path, history if history else [float("nan")])
    return [csv_path, png_path]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg) -> None:
    from .config import derive_seed, parse_train, write_manifest
    from .nn import load_checkpoint
    from .pipeline import train_flow

    section = cfg.section("train")
    coupling_cfg = section.pop("coupling", {"kind": "independent"})
    init_path = section.pop("init", None)
    train_cfg = parse_train(section, _data_dim(cfg, coupling_cfg),
                            derive_seed(cfg.seed, "train"), cfg.model)
    coupling = _coupling_from(cfg, coupling_cfg, train_cfg.seed)
    init = load_checkpoint(init_path)[0] if init_path else None
    result = train_flow(coupling, train_cfg, init=init, checkpoint_dir=cfg.out_dir)
    ckpt = cfg.out_dir / "checkpoint.rfpp"
    result.save(ckpt)
    artifacts = [ckpt] + _loss_history_artifacts(cfg.out_dir, "loss_history",
                                                 result.loss_history)
    artifacts += sorted(cfg.out_dir.glob("ckpt_*.rfpp"))  # cadence checkpoints
    metrics = {"iterations": train_cfg.iterations}
    if result.loss_history:
        metrics["final_loss"] = result.loss_history[-1]
    manifest = write_manifest(cfg.out_dir, "train", cfg, artifacts,
                              seeds={"master": cfg.seed, "train": train_cfg.seed},
                              metrics=metrics)
    print(f"train: wrote {ckpt} and {manifest}")


def _data_dim(cfg, coupling_cfg) -> int:
    from .errors import ConfigError
    from .pipeline import load_pairs

    kind = coupling_cfg.get("kind", "independent")
    if kind == "independent":
        if cfg.target is None and "target" not in coupling_cfg:
            raise ConfigError("no target distribution configured")
        if "target" in coupling_cfg:
            from .config import parse_target

            return parse_target(coupling_cfg["target"]).dim
        return cfg.target.dim
    path = coupling_cfg.get("path") or coupling_cfg.get("inverted")
    return load_pairs(path).dim


def cmd_reflow(cfg) -> None:
    from .config import derive_seed, parse_train, write_manifest
    from .errors import ConfigError
    from .pipeline import ReflowConfig, reflow, save_pairs

    if cfg.target is None:
        raise ConfigError("reflow needs a target distribution")
    section = cfg.section("reflow")
    rounds = int(section.pop("rounds", 2))
    pair_count = int(section.pop("pair_count", 20000))
    pair_nfe = int(section.pop("pair_nfe", 63))
    pair_solver = section.pop("pair_solver", "heun")
    omit_noise = bool(section.pop("pair_omit_noise", False))
    stage_dicts = section.pop("stages", [{} for _ in range(rounds)])
    if section:
        raise ConfigError(f"reflow: unknown keys {sorted(section)}")
    if len(stage_dicts) != rounds:
        raise ConfigError(f"reflow: {rounds} rounds but {len(stage_dicts)} stage configs")
    stages = [parse_train(dict(d), cfg.target.dim, derive_seed(cfg.seed, "stage", k + 1),
                          cfg.model, context=f"reflow.stages[{k}]")
              for k, d in enumerate(stage_dicts)]
    result = reflow(ReflowConfig(target=cfg.target, rounds=rounds, stages=stages,
                                 pair_count=pair_count, pair_nfe=pair_nfe,
                                 pair_solver=pair_solver))
    artifacts = []
    metrics = {"rounds": rounds}
    for k, stage in enumerate(result.stages, start=1):
        ckpt = cfg.out_dir / f"stage{k}.rfpp"
        stage.save(ckpt)
        artifacts.append(ckpt)
        artifacts += _loss_history_artifacts(cfg.out_dir, f"loss_history_stage{k}",
                                             stage.loss_history)
        if stage.loss_history:
            metrics[f"stage{k}_final_loss"] = stage.loss_history[-1]
    for k, ds in enumerate(result.pair_sets, start=1):
        path = cfg.out_dir / f"pairs{k}.rfpr"
        save_pairs(path, ds, omit_noise=omit_noise)
        artifacts.append(path)
        metrics[f"pairs{k}_count"] = ds.count
        metrics[f"pairs{k}_nfe"] = ds.nfe
    manifest = write_manifest(cfg.out_dir, "reflow", cfg, artifacts,
                              seeds={"master": cfg.seed,
                                     **{f"stage{k+1}": s.seed for k, s in enumerate(stages)}},
                              metrics=metrics)
    print(f"reflow: {rounds} stage(s) into {cfg.out_dir} ({manifest})")


def cmd_generate_pairs(cfg) -> None:
    from .config import derive_seed, write_manifest
    from .errors import ConfigError
    from .pipeline import generate_pairs, save_pairs

    section = cfg.section("generate_pairs")
    ckpt_path = section.pop("checkpoint", None)
    if ckpt_path is None:
        raise ConfigError("generate_pairs needs a checkpoint")
    use_ema = bool(section.pop("use_ema", True))
    count = int(section.pop("count", 20000))
    nfe = int(section.pop("nfe", 63))
    solver = section.pop("solver", "heun")
    update_rule = section.pop("update_rule", "default")
    omit_noise = bool(section.pop("omit_noise", False))
    seed = int(section.pop("seed", derive_seed(cfg.seed, "pairs")))
    if section:
        raise ConfigError(f"generate_pairs: unknown keys {sorted(section)}")
    fld, checksum = _load_field(cfg, ckpt_path, use_ema)
    ds = generate_pairs(fld, fld.dim, count, nfe, solver, seed=seed,
                        update_rule=update_rule, source_checksum=checksum)
    path = cfg.out_dir / "pairs.rfpr"
    save_pairs(path, ds, omit_noise=omit_noise)
    manifest = write_manifest(cfg.out_dir, "generate-pairs", cfg, [path],
                              seeds={"master": cfg.seed, "pairs": seed},
                              metrics={"count": ds.count, "nfe_per_record": ds.nfe,
                                       "solver": solver})
    print(f"generate-pairs: {ds.count} pairs into {path} ({manifest})")


def cmd_sample(cfg) -> None:
    from .config import derive_seed, write_manifest
    from .errors import ConfigError
    from .plots import save_scatter_figure
    from .rng import substream
    from .samplers import SolverConfig, TimeSchedule, integrate, steps_for_nfe

    section = cfg.section("sample")
    ckpt_path = section.pop("checkpoint", None)
    if ckpt_path is None:
        raise ConfigError("sample needs a checkpoint")
    use_ema = bool(section.pop("use_ema", True))
    count = int(section.pop("count", 4096))
    nfe = int(section.pop("nfe", 1))
    solver = section.pop("solver", "euler")
    update_rule = section.pop("update_rule", "default")
    seed = int(section.pop("seed", derive_seed(cfg.seed, "sample")))
    if section:
        raise ConfigError(f"sample: unknown keys {sorted(section)}")
    fld, _ = _load_field(cfg, ckpt_path, use_ema)
    zs = substream(seed, "sample-noise").standard_normal((count, fld.dim))
    schedule = TimeSchedule.default(steps_for_nfe(nfe, solver))
    result = integrate(fld, zs, schedule.points,
                       SolverConfig(solver=solver, update_rule=update_rule))
    csv_path = cfg.out_dir / "samples.csv"
    _write_csv(csv_path, [f"x{i}" for i in range(fld.dim)],
               [[f"{v:.17g}" for v in row] for row in result.endpoint])
    artifacts = [csv_path]
    if fld.dim == 2:
        fig_path = cfg.out_dir / "samples.png"
        ref = cfg.target.sample(count, substream(seed, "scatter-ref")) if cfg.target else None
        save_scatter_figure(fig_path, result.endpoint, ref,
                            title=f"{nfe} NFE, {solver}/{update_rule}")
        artifacts.append(fig_path)
    manifest = write_manifest(cfg.out_dir, "sample", cfg, artifacts,
                              seeds={"master": cfg.seed, "sample": seed},
                              metrics={"count": count,
                                       "field_evaluations": result.n_evals,
                                       "requested_nfe": nfe})
    print(f"sample: {count} samples at {result.n_evals} evaluations ({manifest})")


def cmd_invert(cfg) -> None:
    from .config import derive_seed, write_manifest
    from .errors import ConfigError
    from .pipeline import invert_real_data, save_pairs
    from .plots import save_norm_histogram_figure
    from .rng import substream

    section = cfg.section("invert")
    ckpt_path = section.pop("checkpoint", None)
    if ckpt_path is None:
        raise ConfigError("invert needs a checkpoint")
    if cfg.target is None:
        raise ConfigError("invert draws real samples from the target distribution")
    use_ema = bool(section.pop("use_ema", True))
    count = int(section.pop("count", 10000))
    nfe = int(section.pop("nfe", 8))
    solver = section.pop("solver", "euler")
    seed = int(section.pop("seed", derive_seed(cfg.seed, "invert")))
    if section:
        raise ConfigError(f"invert: unknown keys {sorted(section)}")
    fld, checksum = _load_field(cfg, ckpt_path, use_ema)
    xs = cfg.target.sample(count, substream(seed, "real"))
    ds, metrics = invert_real_data(fld, xs, nfe, solver, source_checksum=checksum)
    path = cfg.out_dir / "inverted.rfpr"
    save_pairs(path, ds)
    fig_path = cfg.out_dir / "norm_hist.png"
    import numpy as np

    save_norm_histogram_figure(fig_path, np.sum(ds.zs ** 2, axis=1), ds.dim)
    manifest = write_manifest(cfg.out_dir, "invert", cfg, [path, fig_path],
                              seeds={"master": cfg.seed, "invert": seed},
                              metrics=metrics)
    print(f"invert: {ds.count} pairs, mean ||z||^2 = {metrics['mean_sq_norm']:.4f} ({manifest})")


def cmd_diagnose(cfg) -> None:
    import numpy as np

    from .config import derive_seed, write_manifest
    from .diagnostics import (DiagnosticsReport, chi2_quantile, intersection_probe,
                              reconstruction_error, sliced_wasserstein, straightness)
    from .errors import ConfigError
    from .pipeline import invert_real_data, load_pairs
    from .plots import (save_autocorr_figure, save_norm_histogram_figure,
                        save_reconstruction_figure, save_scatter_figure)
    from .rng import substream
    from .samplers import SolverConfig, TimeSchedule, integrate, save_trajectories

    section = cfg.section("diagnose")
    ckpt_path = section.pop("checkpoint", None)
    if ckpt_path is None:
        raise ConfigError("diagnose needs a checkpoint")
    use_ema = bool(section.pop("use_ema", True))
    n_samples = int(section.pop("samples", 4096))
    swd_projections = int(section.pop("swd_projections", 64))
    n_traj = int(section.pop("trajectories", 256))
    traj_steps = int(section.pop("trajectory_steps", 32))
    nfe_list = [int(v) for v in section.pop("nfe_list", [1, 2, 4, 8])]
    recon_count = int(section.pop("recon_count", 512))
    invert_count = int(section.pop("invert_count", 4096))
    invert_nfe = int(section.pop("invert_nfe", 8))
    pairs_path = section.pop("pairs", None)
    probe_t = float(section.pop("probe_t", 0.5))
    probe_count = int(section.pop("probe_count", 10000))
    seed = int(section.pop("seed", derive_seed(cfg.seed, "diagnose")))
    if section:
        raise ConfigError(f"diagnose: unknown keys {sorted(section)}")
    if cfg.target is None:
        raise ConfigError("diagnose needs a target distribution")

    fld, _ = _load_field(cfg, ckpt_path, use_ema)
    d = fld.dim
    report = DiagnosticsReport(metadata={
        "checkpoint": str(ckpt_path), "use_ema": use_ema, "seed": seed, "dim": d,
    })
    artifacts = []

    # straightness over recorded trajectories
    zs = substream(seed, "traj").standard_normal((n_traj, d))
    res = integrate(fld, zs, TimeSchedule.uniform(traj_steps).points,
                    SolverConfig(solver="euler", record_trajectory=True))
    traj_path = cfg.out_dir / "trajectories.rftj"
    save_trajectories(traj_path, np.asarray(res.times), res.trajectory)
    artifacts.append(traj_path)
    report.straightness_value = straightness(np.asarray(res.times), res.trajectory)
    report.straightness_count = n_traj

    # one-step sample quality against fresh target draws
    ez = substream(seed, "swd-noise").standard_normal((n_samples, d))
    one = integrate(fld, ez, TimeSchedule.default(1).points, SolverConfig()).endpoint
    ref = cfg.target.sample(n_samples, substream(seed, "swd-target"))
    report.swd = sliced_wasserstein(one, ref, swd_projections, seed=seed)
    report.swd_count = n_samples
    scatter_path = cfg.out_dir / "samples_1nfe.png"
    save_scatter_figure(scatter_path, one, ref, title="1 NFE")
    if d == 2:
        artifacts.append(scatter_path)

    # reconstruction error across NFE budgets
    recon_xs = cfg.target.sample(recon_count, substream(seed, "recon"))
    report.recon_mse = {n: reconstruction_error(fld, recon_xs, n) for n in nfe_list}
    report.recon_count = recon_count
    recon_csv = cfg.out_dir / "recon.csv"
    _write_csv(recon_csv, ["nfe", "mse"],
               [(n, f"{report.recon_mse[n]:.17g}") for n in sorted(report.recon_mse)])
    recon_png = cfg.out_dir / "recon.png"
    save_reconstruction_figure(recon_png, sorted(report.recon_mse),
                               [report.recon_mse[n] for n in sorted(report.recon_mse)])
    artifacts += [recon_csv, recon_png]

    # inverted-noise Gaussianity
    inv_xs = cfg.target.sample(invert_count, substream(seed, "invert-real"))
    inv_ds, _ = invert_real_data(fld, inv_xs, invert_nfe, "euler")
    report.norm_sq = np.sum(inv_ds.zs ** 2, axis=1)
    report.norm_sq_dim = d
    hist_png = cfg.out_dir / "norm_hist.png"
    save_norm_histogram_figure(hist_png, report.norm_sq, d)
    counts, edges = np.histogram(report.norm_sq, bins=50)
    hist_csv = cfg.out_dir / "norm_hist.csv"
    _write_csv(hist_csv, ["bin_lo", "bin_hi", "count"],
               [(f"{edges[i]:.17g}", f"{edges[i+1]:.17g}", int(c))
                for i, c in enumerate(counts)])
    artifacts += [hist_png, hist_csv]

    # constructed-noise probe over stored pairs
    if pairs_path:
        ds = load_pairs(pairs_path)
        rng = substream(seed, "probe")
        take = min(probe_count, ds.count)
        i = rng.permutation(ds.count)[:take]
        j = rng.permutation(ds.count)[:take]
        probe = intersection_probe(ds.xs[i], ds.zs[i], ds.xs[j], probe_t,
                                   max_lag=min(8, d - 1))
        report.probe = probe
        lags = np.arange(1, len(probe.mean_autocorr) + 1)
        ac_csv = cfg.out_dir / "autocorr.csv"
        _write_csv(ac_csv, ["lag", "mean_autocorr", "gaussian_band99"],
                   [(int(l), f"{probe.mean_autocorr[k]:.17g}",
                     f"{probe.gaussian_autocorr_band99[k]:.17g}")
                    for k, l in enumerate(lags)])
        ac_png = cfg.out_dir / "autocorr.png"
        save_autocorr_figure(ac_png, lags, probe.mean_autocorr,
                             probe.gaussian_autocorr_band99)
        artifacts += [ac_csv, ac_png]

    payload = report.to_json()
    payload["inverted_norm_sq"]["annulus_99pct"] = [chi2_quantile(d, 0.005),
                                                    chi2_quantile(d, 0.995)]
    report_path = cfg.out_dir / "report.json"
    import json

    report_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    artifacts.append(report_path)
    manifest = write_manifest(cfg.out_dir, "diagnose", cfg, artifacts,
                              seeds={"master": cfg.seed, "diagnose": seed},
                              metrics={"straightness": report.straightness_value,
                                       "sliced_wasserstein": report.swd})
    print(f"diagnose: report at {report_path} ({manifest})")


def cmd_profile_loss(cfg) -> None:
    from .config import derive_seed, write_manifest
    from .errors import ConfigError
    from .fields import GmmVelocityField
    from .losses import loss_profile
    from .plots import save_loss_profile_figure
    from .rng import substream

    section = cfg.section("profile_loss")
    ckpt_path = section.pop("checkpoint", None)
    use_ema = bool(section.pop("use_ema", True))
    coupling_cfg = section.pop("coupling", {"kind": "independent"})
    bins = int(section.pop("bins", 16))
    samples_per_bin = int(section.pop("samples_per_bin", 2048))
    analytic_bound = bool(section.pop("analytic_bound", True))
    seed = int(section.pop("seed", derive_seed(cfg.seed, "profile")))
    if section:
        raise ConfigError(f"profile_loss: unknown keys {sorted(section)}")
    if ckpt_path is not None:
        fld, _ = _load_field(cfg, ckpt_path, use_ema)
    elif cfg.target is not None:
        fld = GmmVelocityField(cfg.target)
    else:
        raise ConfigError("profile_loss needs a checkpoint or a target distribution")
    coupling = _coupling_from(cfg, coupling_cfg, seed)
    gmm = cfg.target if (analytic_bound and coupling.kind == "independent") else None
    profile = loss_profile(fld, lambda rng, n: coupling.draw(n), bins, samples_per_bin,
                           substream(seed, "profile"), gmm=gmm)
    rows = []
    for k in range(bins):
        row = [f"{profile.edges[k]:.17g}", f"{profile.edges[k+1]:.17g}",
               f"{profile.centers[k]:.17g}", f"{profile.mean[k]:.17g}",
               f"{profile.std[k]:.17g}", int(profile.count[k])]
        if profile.lower_bound is not None:
            row.append(f"{profile.lower_bound[k]:.17g}")
        rows.append(row)
    header = ["t_lo", "t_hi", "t_mid", "mean", "std", "count"]
    if profile.lower_bound is not None:
        header.append("lower_bound")
    csv_path = cfg.out_dir / "profile.csv"
    _write_csv(csv_path, header, rows)
    png_path = cfg.out_dir / "profile.png"
    save_loss_profile_figure(png_path, profile)
    manifest = write_manifest(cfg.out_dir, "profile-loss", cfg, [csv_path, png_path],
                              seeds={"master": cfg.seed, "profile": seed},
                              metrics={"bins": bins, "samples_per_bin": samples_per_bin})
    print(f"profile-loss: {csv_path} ({manifest})")


if __name__ == "__main__":
    sys.exit(main())
