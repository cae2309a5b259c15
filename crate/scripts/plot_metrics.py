#!/usr/bin/env python3
"""Plot training curves from an `adept pretrain` metrics.jsonl file.

Usage:
    python3 scripts/plot_metrics.py runs/demo/metrics.jsonl [curves.png]

Each line of the input is one epoch's JSON record. The plot shows the
contrastive, denoising, and total losses over global epochs, with a vertical
line at the stage boundary.
"""

import json
import sys


def main() -> None:
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    path = sys.argv[1]
    out = sys.argv[2] if len(sys.argv) > 2 else "curves.png"

    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        sys.exit(f"{path}: no epoch records")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        sys.exit("matplotlib is required: pip install matplotlib")

    xs = list(range(len(rows)))
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(xs, [r["l_ctr"] for r in rows], label="contrastive")
    ax.plot(xs, [r["l_de"] for r in rows], label="denoising (weighted)")
    ax.plot(xs, [r["total"] for r in rows], label="total", linestyle="--")

    stage1_epochs = sum(1 for r in rows if r["stage"] == 1)
    if 0 < stage1_epochs < len(rows):
        ax.axvline(stage1_epochs - 0.5, color="gray", linewidth=0.8)
        ax.text(stage1_epochs - 0.5, ax.get_ylim()[1], " stage 2", va="top", color="gray")

    ax.set_xlabel("global epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
