"""Delimited output and figure rendering for the experiment runner.

CSV files are the archival record: fixed column order, floats at 17
significant digits, so reruns with the same config and seed are
byte-identical.  Figures are matplotlib SVGs written next to the CSV.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# stable ids and no embedded date, so reruns give identical SVG bytes too
matplotlib.rcParams["svg.hashsalt"] = "qfpt"
_SVG_META = {"Date": None}


def fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int,)):
        return str(x)
    if x is None:
        return ""
    if isinstance(x, str):
        if "," in x or '"' in x:
            return '"' + x.replace('"', '""') + '"'
        return x
    xf = float(x)
    if math.isnan(xf):
        return "nan"
    if math.isinf(xf):
        return "inf" if xf > 0 else "-inf"
    return f"{xf:.17g}"


def write_csv(path: Path, header: list[str], rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_manifest(path: Path, experiment: str, config: dict, seed, outputs: list[str],
                   started: float) -> Path:
    import numpy
    import scipy

    from . import __version__

    payload = {
        "experiment": experiment,
        "config": config,
        "seed": seed,
        "versions": {
            "qfpt": __version__,
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "wall_time_s": round(time.time() - started, 3),
        "outputs": outputs,
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")
    return path


def figure_sweep_kappa(pairs, k: int, path: Path) -> Path:
    kappas = [p[0] for p in pairs]
    js = [p[1] for p in pairs]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(kappas, js, "--", color="tab:blue", label=r"$\mathcal{J}_K(0)$")
    ax.axhline(k, color="k", lw=1.2, label=r"$K$ (classical limit)")
    ax.set_xlabel(r"$\kappa$")
    ax.set_ylabel("Fisher information")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)
    return Path(path)


def figure_sweep_random(rows, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.4))
    prec = [r.precision for r in rows]

    ax = axes[0]
    ax.loglog([r.qfi for r in rows], prec, "^", ms=4, mfc="none", color="tab:blue")
    jgrid = sorted(r.qfi for r in rows)
    ax.loglog(jgrid, [1.0 / j for j in jgrid], "k--", lw=1.2, label=r"$1/\mathcal{J}_K(0)$")
    ax.set_xlabel(r"$\mathcal{J}_K(0)$")
    ax.set_ylabel("precision")
    ax.legend(frameon=False)

    ax = axes[1]
    ax.semilogy([r.k for r in rows], prec, "o", ms=4, mfc="none", color="tab:orange")
    ks = sorted({r.k for r in rows})
    ax.semilogy(ks, [1.0 / k for k in ks], "k--", lw=1.2, label=r"$1/K$")
    ax.set_xlabel(r"$K$")
    ax.set_ylabel("precision")
    ax.legend(frameon=False)

    fig.tight_layout()
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)
    return Path(path)


def figure_ancilla(rows, path: Path) -> Path:
    # rows: (k, eta_analytic, eta_ancilla, stderr)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ks = [r[0] for r in rows]
    ax.semilogy(ks, [r[1] for r in rows], "o", mfc="none", color="tab:blue",
                label="analytic")
    ax.semilogy(ks, [max(r[2], 1e-12) for r in rows], "x", color="tab:red",
                label="ancilla")
    ax.set_xlabel(r"$K$")
    ax.set_ylabel(r"$\eta$")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, metadata=_SVG_META)
    plt.close(fig)
    return Path(path)
