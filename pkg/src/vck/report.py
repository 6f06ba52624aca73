"""Artifact writers: CSV tables, two-column plot data and PNG figures.

Numbers are written with 17 significant digits so every table round-trips
exactly.  matplotlib is imported only inside the figure helpers.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .grid import DensityField


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])
    return path


def write_dat(path, x, y, comment: str = "") -> Path:
    """Whitespace-separated two-column file readable by gnuplot and friends."""
    path = Path(path)
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for a, b in zip(x, y):
            fh.write(f"{fmt(float(a))} {fmt(float(b))}\n")
    return path


def write_field(path, F: DensityField) -> Path:
    g = F.grid
    V, Y = g.mesh()
    I, J = np.meshgrid(np.arange(g.n_v), np.arange(g.n_y), indexing="ij")
    rows = zip(I.ravel(), J.ravel(), V.ravel(), Y.ravel(), F.values.ravel())
    return write_csv(path, ["i", "j", "v", "y", "F"], rows)


def read_field_values(path, shape) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    return data[:, 4].reshape(shape)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curve(path, x, y, xlabel, ylabel, logx=False, logy=False, title="") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    ax.plot(x, y, lw=1.2)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_field(path, F: DensityField, title="") -> Path:
    plt = _pyplot()
    g = F.grid
    fig, ax = plt.subplots(figsize=(4.5, 3.4), dpi=120)
    im = ax.pcolormesh(g.v_faces, g.y_faces, F.values.T, shading="flat", cmap="viridis")
    fig.colorbar(im, ax=ax, label="F")
    ax.axhline(g.y_F, color="w", lw=0.6, ls="--")
    ax.set_xlabel("v")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
