"""Deterministic writers: RFC-4180 CSV, stable-key JSON and an SVG heatmap."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .remainder import RemainderField

# 9-stop ramp sampled from viridis
RAMP = [
    (0x44, 0x01, 0x54), (0x47, 0x2D, 0x7B), (0x3B, 0x52, 0x8B), (0x2C, 0x72, 0x8E), (0x21, 0x91, 0x8C),
    (0x28, 0xAE, 0x80), (0x5E, 0xC9, 0x62), (0xAD, 0xDC, 0x30), (0xFD, 0xE7, 0x25),
]
MASK_COLOR = "#9e9e9e"


def atomic_write(path, data: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def to_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write(path, to_json(obj))


def config_hash(cfg) -> str:
    canon = json.dumps(_clean(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    return atomic_write(path, to_csv(header, rows))


def field_header(field: RemainderField):
    d = field.t_points.shape[1]
    if d == 1:
        return ["t", "m", "delta", "mask"]
    return [f"t{i + 1}" for i in range(d)] + [f"m{i + 1}" for i in range(field.m_points.shape[1])] + ["delta", "mask"]


def field_csv(field: RemainderField) -> str:
    return to_csv(field_header(field), field.rows())


def ramp_color(u: float) -> str:
    u = min(1.0, max(0.0, u)) * (len(RAMP) - 1)
    k = min(int(u), len(RAMP) - 2)
    f = u - k
    c = [round(a + (b - a) * f) for a, b in zip(RAMP[k], RAMP[k + 1])]
    return "#{:02x}{:02x}{:02x}".format(*c)


def _tick(v: float) -> str:
    return f"{v:.3g}"


def heatmap_svg(field: RemainderField, title: str = "", vmax: float | None = None, size: int = 480) -> str:
    """Delta over (t, m): t on the horizontal axis, m increasing upward; masked cells gray."""
    vals = field.values
    nt, nm = vals.shape
    valid = field.valid
    if vmax is None:
        vmax = float(np.quantile(vals[valid], 0.95)) if valid.any() else 1.0
    vmax = vmax if vmax > 0 else 1.0
    left, top, bar = 70, 40, 60
    cw, ch = size / nt, size / nm
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{left + size + bar + 60}" '
        f'height="{top + size + 60}" font-family="sans-serif" font-size="12">',
        f'<text x="{left + size / 2:.2f}" y="20" text-anchor="middle">{title}</text>',
        '<g shape-rendering="crispEdges">',
    ]
    for j in range(nm):
        y = top + size - (j + 1) * ch
        i = 0
        while i < nt:
            color = ramp_color(vals[i, j] / vmax) if valid[i, j] else MASK_COLOR
            k = i + 1
            while k < nt and (ramp_color(vals[k, j] / vmax) if valid[k, j] else MASK_COLOR) == color:
                k += 1
            out.append(f'<rect x="{left + i * cw:.3f}" y="{y:.3f}" width="{(k - i) * cw:.3f}" '
                       f'height="{ch:.3f}" fill="{color}"/>')
            i = k
    out.append("</g>")
    one_d = field.t_points.shape[1] == 1
    tx = field.t_points[:, 0] if one_d else np.arange(nt, dtype=float)
    my = field.m_points[:, 0] if field.m_points.shape[1] == 1 else np.arange(nm, dtype=float)
    for q in np.linspace(0, 1, 5):
        i = min(nt - 1, int(round(q * (nt - 1))))
        x = left + (i + 0.5) * cw
        out.append(f'<line x1="{x:.2f}" y1="{top + size}" x2="{x:.2f}" y2="{top + size + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + size + 18}" text-anchor="middle">{_tick(tx[i])}</text>')
        j = min(nm - 1, int(round(q * (nm - 1))))
        y = top + size - (j + 0.5) * ch
        out.append(f'<line x1="{left - 5}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{_tick(my[j])}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + size / 2:.2f}" y="{top + size + 40}" text-anchor="middle">'
               f'{"t" if one_d else "t (grid index)"}</text>')
    out.append(f'<text x="20" y="{top + size / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 20 {top + size / 2:.2f})">'
               f'{"m" if field.m_points.shape[1] == 1 else "m (grid index)"}</text>')
    bx = left + size + 20
    steps = 64
    for s in range(steps):
        y = top + size - (s + 1) * size / steps
        out.append(f'<rect x="{bx}" y="{y:.3f}" width="16" height="{size / steps:.3f}" '
                   f'fill="{ramp_color((s + 0.5) / steps)}"/>')
    out.append(f'<text x="{bx + 20}" y="{top + size}">0</text>')
    out.append(f'<text x="{bx + 20}" y="{top + 10}">{_tick(vmax)}+</text>')
    out.append(f'<text x="{bx}" y="{top - 8}">Delta</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
