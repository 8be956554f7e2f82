"""Static figures written next to the CSV output (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def phase_field(state, path, title: str = "") -> Path:
    mesh = state.mesh
    tri = mtri.Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.triangles)
    r = mesh.rect
    fig, ax = plt.subplots(figsize=(4.0, 4.0 * (r.y1 - r.y0) / (r.x1 - r.x0) + 0.4))
    tpc = ax.tripcolor(tri, state.phi.coeffs, shading="gouraud", cmap="RdBu_r", vmin=-1, vmax=1)
    ax.set_aspect("equal")
    ax.set_xlim(r.x0, r.x1)
    ax.set_ylim(r.y0, r.y1)
    ax.set_title(title or f"phi, t = {state.time:g}")
    fig.colorbar(tpc, ax=ax, shrink=0.8)
    return _save(fig, path)


def energy_mass(series: dict, path) -> Path:
    """``series`` maps a label to ``(steps, energy, mass)`` arrays."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    for label, (steps, energy, mass) in series.items():
        a.plot(steps, energy, label=label)
        b.plot(steps, mass, label=label)
    a.set_xlabel("step")
    a.set_ylabel("energy")
    a.set_yscale("log")
    b.set_xlabel("step")
    b.set_ylabel("mass")
    b.ticklabel_format(useOffset=False)
    a.legend()
    b.legend()
    return _save(fig, path)


def centroid(series: dict, path) -> Path:
    """``series`` maps a label to ``(times, centroid_y)`` arrays."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (t, y) in series.items():
        ax.plot(t, y, label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("centroid y")
    ax.legend()
    return _save(fig, path)


def convergence(rows: list, path, fields=("phi_L2", "u_L2", "B_L2", "phi_H1", "u_H1", "B_H1", "p_L2")) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=False)
    settings = sorted({r["density"] for r in rows})
    for ax, setting in zip(np.atleast_1d(axes), settings):
        sub = [r for r in rows if r["density"] == setting]
        h = np.array([r["h"] for r in sub])
        for f in fields:
            ax.loglog(h, [r[f] for r in sub], "o-", label=f)
        ax.loglog(h, h ** 2 * sub[0]["phi_L2"] / h[0] ** 2, "k:", label="h^2")
        ax.loglog(h, h * sub[0]["u_H1"] / h[0], "k--", label="h")
        ax.set_xlabel("h")
        ax.set_title(setting)
        ax.legend(fontsize=7)
    return _save(fig, path)
