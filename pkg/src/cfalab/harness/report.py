"""Plain-text artifacts: parameter accounting and the markdown summary."""

from __future__ import annotations

import csv
from pathlib import Path

from ..model import CfaModel
from .config import TrainConfig


def params_text(cfg: TrainConfig) -> str:
    """Parameter accounting of the adapter model next to its full fine-tune counterpart."""
    lora = CfaModel.init(cfg.with_(arm="full_cfa").model_config(), cfg.seed)
    full = CfaModel.init(cfg.with_(arm="frozen_vs_fullft").model_config(), cfg.seed)
    a, f = lora.count_parameters(), full.count_parameters()
    r = cfg.model.lora_rank
    lines = [
        "# frozen encoder + LoRA",
        f"trainable = {a['trainable']}",
        f"frozen = {a['frozen']}",
        f"ratio = {a['ratio']:.6f}",
    ]
    for name, count in sorted(a["lora"].items()):
        d_in, d_out = lora.params[name].shape
        lines.append(f"lora {name} = {count}  # r*(d_in+d_out) = {r}*({d_in}+{d_out})")
    lines += [
        "# full fine-tune",
        f"trainable = {f['trainable']}",
        f"frozen = {f['frozen']}",
        f"ratio = {f['ratio']:.6f}",
        "# comparison",
        f"trainable_reduction = {1.0 - a['trainable'] / f['trainable']:.6f}",
    ]
    return "\n".join(lines) + "\n"


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _table(rows: list[dict], columns: list[str]) -> list[str]:
    out = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    out += ["| " + " | ".join(row.get(c, "") for c in columns) + " |" for row in rows]
    return out


def render_report(out_dir) -> str:
    """Summarise whichever CSV artifacts exist in ``out_dir`` as markdown."""
    out_dir = Path(out_dir)
    parts = ["# Run summary", ""]
    found = False
    sections = [
        ("report.csv", "Evaluation"),
        ("ablation.csv", "Component ablation (medians over seeds)"),
        ("data_eff.csv", "Data efficiency"),
        ("sensitivity.csv", "Generation weight sweep"),
        ("gradcheck.csv", "Gradient check"),
    ]
    for fname, title in sections:
        path = out_dir / fname
        if not path.exists():
            continue
        rows = _read_csv(path)
        if not rows:
            continue
        found = True
        parts += [f"## {title}", ""] + _table(rows, list(rows[0].keys())) + [""]
    hist = out_dir / "history.csv"
    if hist.exists():
        rows = _read_csv(hist)
        if rows:
            found = True
            first, last = rows[0], rows[-1]
            parts += [
                "## Training",
                "",
                f"epochs: {len(rows)}; focal loss {float(first['focal']):.4f} -> {float(last['focal']):.4f}; "
                f"total {float(first['total']):.4f} -> {float(last['total']):.4f}",
                "",
            ]
    params = out_dir / "params.txt"
    if params.exists():
        found = True
        parts += ["## Parameters", "", "```", params.read_text(encoding="utf-8").rstrip(), "```", ""]
    if not found:
        parts += ["No artifacts found.", ""]
    return "\n".join(parts)
