"""Small SVG renderers for the result tables. The CSV files are the contract;
these figures are a convenience view of the same data. Output is byte-stable:
fixed hash salt, no embedded dates, fixed figure geometry.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "rpf"
matplotlib.rcParams["figure.figsize"] = (6.0, 4.0)
matplotlib.rcParams["figure.dpi"] = 100

_META = {"Date": None}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def box_plot(groups: dict[str, np.ndarray], path, ylabel: str = "",
             title: str = "", log: bool = False) -> None:
    """One box per named group of samples."""
    fig, ax = plt.subplots()
    labels = list(groups)
    data = [np.asarray(groups[k], dtype=float) for k in labels]
    data = [d[np.isfinite(d)] for d in data]
    ax.boxplot(data, tick_labels=labels, whis=1.5, sym="x")
    if log:
        ax.set_yscale("log")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=45)
    _finish(fig, path)


def scatter_plot(x, y, path, xlabel: str = "", ylabel: str = "",
                 title: str = "", xlog: bool = False, ylog: bool = False) -> None:
    fig, ax = plt.subplots()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y)
    ax.scatter(x[keep], y[keep], s=12, alpha=0.7, edgecolors="none")
    if xlog:
        ax.set_xscale("log")
    if ylog:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    _finish(fig, path)


def contour_plot(x_axis, y_axis, z, path, xlabel: str = "", ylabel: str = "",
                 title: str = "", marks: list | None = None,
                 log: bool = True) -> None:
    """Filled contour of a grid table; marks are (x, y, label) annotations."""
    fig, ax = plt.subplots()
    X, Y = np.meshgrid(np.asarray(x_axis), np.asarray(y_axis), indexing="ij")
    Z = np.asarray(z, dtype=float)
    if log:
        Z = np.log10(np.maximum(Z, 1e-16))
    cs = ax.contourf(X, Y, Z, levels=20)
    fig.colorbar(cs, ax=ax)
    for mx, my, label in marks or []:
        ax.plot([mx], [my], marker="*", markersize=12, color="white",
                markeredgecolor="black")
        if label:
            ax.annotate(label, (mx, my), textcoords="offset points",
                        xytext=(6, 6), fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    _finish(fig, path)
