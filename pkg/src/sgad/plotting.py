"""Matplotlib figures written next to the CSV reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
FIELD_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")
# no timestamps or version strings, so identical inputs give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_score_differences(traces, path):
    """Mean S0..S3 over runs against epoch, with a min-max band."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for k in range(4):
            curves = np.array(
                [[np.nan if d[k] is None else d[k] for d in t.score_diffs] for t in traces if t.score_diffs],
                dtype=float,
            )
            if curves.size == 0 or np.all(np.isnan(curves)):
                continue
            epochs = np.arange(1, curves.shape[1] + 1)
            ax.plot(epochs, np.nanmean(curves, axis=0), color=FIELD_COLORS[k], label=f"$S_{k}$")
            if curves.shape[0] > 1:
                ax.fill_between(epochs, np.nanmin(curves, axis=0), np.nanmax(curves, axis=0), color=FIELD_COLORS[k], alpha=0.15, lw=0)
        ax.axhline(0.0, color="0.6", lw=0.6)
        ax.set_xlabel("epoch")
        ax.set_ylabel("score difference")
        ax.legend(frameon=False, ncol=4)
        _save(fig, path)


def plot_histogram(hist, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        widths = np.diff(hist.edges)
        ax.bar(hist.edges[:-1], hist.counts_normal, width=widths, align="edge", alpha=0.6, label="normal", color="#1f77b4")
        ax.bar(hist.edges[:-1], hist.counts_abnormal, width=widths, align="edge", alpha=0.6, label="abnormal", color="#d62728")
        ax.set_xlabel("anomaly score")
        ax.set_ylabel("count")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_heatmap(matrix, values_a, values_b, name_a, name_b, path):
    matrix = np.asarray(matrix, dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(values_b), 1.0 + 0.6 * len(values_a)))
        im = ax.imshow(matrix, cmap="Blues", aspect="auto")
        ax.set_xticks(range(len(values_b)), [str(v) for v in values_b])
        ax.set_yticks(range(len(values_a)), [str(v) for v in values_a])
        ax.set_xlabel(name_b)
        ax.set_ylabel(name_a)
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                ax.text(j, i, f"{matrix[i, j]:.3f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax, label="AUC-ROC")
        _save(fig, path)


def plot_rates(rows, path):
    """``rows`` as written to rates.csv: (rate, variant, auc_mean, auc_std, ...)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for variant in dict.fromkeys(r[1] for r in rows):
            pts = [(r[0], r[2], r[3]) for r in rows if r[1] == variant and r[2] is not None]
            if not pts:
                continue
            x, y, err = map(np.array, zip(*pts))
            ax.errorbar(x * 100, y, yerr=err, marker="o", ms=3, capsize=2, label=variant)
        ax.set_xlabel("training anomaly rate (%)")
        ax.set_ylabel("AUC-ROC")
        ax.legend(frameon=False)
        _save(fig, path)
