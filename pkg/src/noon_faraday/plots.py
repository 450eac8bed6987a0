"""SVG figures for the CLI. Presentation only."""

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "noon-faraday"
plt.rcParams["svg.fonttype"] = "path"


def svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def spectra_figure(temperature, curves):
    """curves: list of (B_mT, detuning_MHz, transmission)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for b, x, y in curves:
        ax.plot(x, y, lw=1, label=f"{b:g} mT")
    ax.axvline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("detuning from probe (MHz)")
    ax.set_ylabel("transmission")
    ax.set_title(f"{temperature:g} C")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    return svg_bytes(fig)


def fringes_figure(B_mT, table):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    if table.singles is not None:
        ax1.plot(B_mT, table.column("H"), label="H")
        ax1.plot(B_mT, table.column("V"), label="V")
        ax1.set_ylabel("singles P")
        ax1.legend(fontsize=7)
    for name in table.outcomes:
        ax2.plot(B_mT, table.column(name), label=name)
    ax2.set_xlabel("B (mT)")
    ax2.set_ylabel("coincidence P")
    ax2.legend(fontsize=7)
    return svg_bytes(fig)


def fisher_figure(B_mT, fi, fi_over_s, sql=None, sql_over_s=None):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax1.plot(B_mT, fi / 2.0, label="NOON, per photon")
    if sql is not None:
        ax1.plot(B_mT, sql, "k--", lw=0.8, label="SQL")
    ax1.set_ylabel("FI per photon (T$^{-2}$)")
    ax1.legend(fontsize=7)
    ax2.plot(B_mT, fi_over_s, label="NOON")
    if sql_over_s is not None:
        ax2.plot(B_mT, sql_over_s, "k--", lw=0.8, label="SQL")
    ax2.set_yscale("log")
    ax2.set_xlabel("B (mT)")
    ax2.set_ylabel("FI / S (T$^{-2}$)")
    ax2.legend(fontsize=7)
    return svg_bytes(fig)
