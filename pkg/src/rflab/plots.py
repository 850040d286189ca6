"""Report figures, rendered to files next to the CSV/JSON tables."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 130


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_loss_profile_figure(path, profile) -> None:
    """Per-timestep loss with a one-sigma band, plus the analytic floor if known."""
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    c = profile.centers
    ax.plot(c, profile.mean, color="tab:blue", label="loss")
    ax.fill_between(c, profile.mean - profile.std, profile.mean + profile.std,
                    color="tab:blue", alpha=0.2, linewidth=0)
    if profile.lower_bound is not None:
        ax.plot(c, profile.lower_bound, color="tab:red", linestyle="--",
                label="non-reducible term")
    ax.set_xlabel("t")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _finish(fig, path)


def save_norm_histogram_figure(path, norm_sq: np.ndarray, dim: int) -> None:
    """Squared norms of inverted noise against the exact chi-square density."""
    from .diagnostics import chi2_density

    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.hist(norm_sq, bins=60, density=True, alpha=0.6, color="tab:blue",
            label="inverted noise")
    grid = np.linspace(0.0, max(float(np.max(norm_sq)), dim + 4.0 * np.sqrt(2.0 * dim)), 400)
    ax.plot(grid, chi2_density(dim, grid), color="tab:green",
            label=f"chi-square ({dim} dof)")
    ax.set_xlabel(r"$\|z\|^2$")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    _finish(fig, path)


def save_autocorr_figure(path, lags: np.ndarray, mean_curve: np.ndarray,
                         band: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.fill_between(lags, -band, band, color="tab:green", alpha=0.25,
                    label="Gaussian 99% band")
    ax.plot(lags, mean_curve, marker="o", color="tab:red", label="constructed noise")
    ax.set_xlabel("lag")
    ax.set_ylabel("mean autocorrelation")
    ax.legend(frameon=False)
    _finish(fig, path)


def save_reconstruction_figure(path, nfes, mses) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(nfes, mses, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("NFE (inversion = reconstruction)")
    ax.set_ylabel("reconstruction MSE")
    _finish(fig, path)


def save_scatter_figure(path, samples: np.ndarray, reference: np.ndarray | None = None,
                        title: str = "") -> None:
    """2-d sample scatter; silently skipped for other dimensions."""
    samples = np.atleast_2d(samples)
    if samples.shape[1] != 2:
        return
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    if reference is not None:
        ax.scatter(reference[:, 0], reference[:, 1], s=4, alpha=0.25,
                   color="tab:gray", label="target")
    ax.scatter(samples[:, 0], samples[:, 1], s=4, alpha=0.5, color="tab:blue",
               label="samples")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, loc="upper left")
    _finish(fig, path)


def save_loss_history_figure(path, history) -> None:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(np.arange(1, len(history) + 1), history, linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    _finish(fig, path)
