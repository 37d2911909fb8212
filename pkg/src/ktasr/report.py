"""Report rendering: delimited tables plus matplotlib figures written next
to them."""

import csv
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_grid_csv(rows, path):
    """Ablation grid rows -> CSV. Each row: {query, shift, seed CERs,
    dev_mean, dev_sd, test_mean, test_sd}."""
    if not rows:
        return
    fields = ["query", "shift", "dev_mean", "dev_sd", "test_mean", "test_sd",
              "dev_cers", "test_cers"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            out = dict(r)
            out["dev_cers"] = " ".join(f"{c:.4f}" for c in r["dev_cers"])
            out["test_cers"] = " ".join(f"{c:.4f}" for c in r["test_cers"])
            w.writerow({k: out[k] for k in fields})


def write_grid_json(rows, path):
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)


def render_grid_figure(rows, path):
    """Grouped bar chart of mean test CER with sd error bars, one group per
    query mode, one bar per shift."""
    shifts = [0, -1, 1]
    queries = []
    for r in rows:
        if r["query"] not in queries:
            queries.append(r["query"])
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.25
    for si, shift in enumerate(shifts):
        xs, means, sds = [], [], []
        for qi, q in enumerate(queries):
            match = [r for r in rows if r["query"] == q and r["shift"] == shift]
            if not match:
                continue
            xs.append(qi + (si - 1) * width)
            means.append(match[0]["test_mean"])
            sds.append(match[0]["test_sd"])
        ax.bar(xs, means, width, yerr=sds, capsize=3, label=f"shift {shift}")
    ax.set_xticks(range(len(queries)))
    ax.set_xticklabels(queries)
    ax.set_ylabel("test CER")
    ax.set_title("query mode x shift ablation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(epoch_records, path):
    """Train/dev loss per epoch from the epochs.jsonl records."""
    if not epoch_records:
        return
    epochs = [r["epoch"] for r in epoch_records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["train_loss"] for r in epoch_records], marker="o",
            label="train loss")
    ax.plot(epochs, [r["dev_loss"] for r in epoch_records], marker="s",
            label="dev loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
