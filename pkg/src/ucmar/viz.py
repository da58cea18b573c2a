"""PNG comparison panels for a trained UC run."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .errors import InvalidArgument  # noqa: E402


def check_zoom(zoom, grid_size):
    """``zoom`` is (row0, col0, row1, col1) with 0 <= row0 < row1 <= grid_size."""
    if zoom is None:
        return None
    r0, c0, r1, c1 = (int(v) for v in zoom)
    if not (0 <= r0 < r1 <= grid_size and 0 <= c0 < c1 <= grid_size):
        raise InvalidArgument(f"zoom box {zoom} lies outside the {grid_size}x{grid_size} grid")
    return r0, c0, r1, c1


def panel_figure(corrupted, restorations, epochs, uncertainty, uc_output, clean, extra=None, zoom=None):
    """One row of tiles: corrupted | restorations per epoch | U | UC output | [extra] | ground truth.

    ``extra`` is an optional (title, image) tile, e.g. the baseline restoration.
    With ``zoom`` set, a second row shows the boxed region of every tile.
    """
    tiles = [("corrupted", corrupted, "gray", (0, 1))]
    tiles += [(f"epoch {e}", r, "gray", (0, 1)) for e, r in zip(epochs, restorations)]
    tiles.append(("uncertainty", uncertainty, "inferno", (0.0, 1.0)))
    tiles.append(("UC restoration", uc_output, "gray", (0, 1)))
    if extra is not None:
        tiles.append((extra[0], extra[1], "gray", (0, 1)))
    tiles.append(("ground truth", clean, "gray", (0, 1)))

    n_rows = 2 if zoom is not None else 1
    fig, axes = plt.subplots(n_rows, len(tiles), figsize=(2.2 * len(tiles), 2.4 * n_rows), squeeze=False)
    for j, (title, img, cmap, (lo, hi)) in enumerate(tiles):
        ax = axes[0, j]
        im = ax.imshow(img, cmap=cmap, vmin=lo, vmax=hi, interpolation="nearest")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
        if title == "uncertainty":
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02)
        if zoom is not None:
            r0, c0, r1, c1 = zoom
            ax.add_patch(Rectangle((c0 - 0.5, r0 - 0.5), c1 - c0, r1 - r0, fill=False, edgecolor="red", lw=1))
            zax = axes[1, j]
            zax.imshow(img[r0:r1, c0:c1], cmap=cmap, vmin=lo, vmax=hi, interpolation="nearest")
            zax.axis("off")
    fig.tight_layout()
    return fig, len(tiles)


def render_panel(path, corrupted, restorations, epochs, uncertainty, uc_output, clean, extra=None, zoom=None):
    """Write the panel from :func:`panel_figure` to ``path`` as PNG; returns the tile count."""
    fig, n_tiles = panel_figure(corrupted, restorations, epochs, uncertainty, uc_output, clean, extra, zoom)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return n_tiles
