"""Token heatmaps (terminal and standalone HTML) from normalized scores."""

from __future__ import annotations

import html


def _rgb(v: float):
    # white (0) -> red (1)
    v = min(1.0, max(0.0, float(v)))
    g = int(round(255 * (1.0 - v)))
    return 255, g, g


def ansi_heatmap(tokens, normalized, rankable) -> str:
    parts = []
    for tok, v, r in zip(tokens, normalized, rankable):
        if not r:
            continue
        red, g, b = _rgb(v)
        parts.append(f"\x1b[48;2;{red};{g};{b}m\x1b[38;2;0;0;0m {tok} \x1b[0m")
    return "".join(parts)


def html_heatmap(rows, title: str = "attributions") -> str:
    """``rows``: iterable of ``(label, tokens, normalized, rankable)``."""
    body = []
    for label, tokens, normalized, rankable in rows:
        spans = []
        for tok, v, r in zip(tokens, normalized, rankable):
            if not r:
                continue
            red, g, b = _rgb(v)
            spans.append(f'<span style="background:rgb({red},{g},{b});padding:2px 4px;'
                         f'margin:1px;border-radius:3px" title="{v:.3f}">{html.escape(tok)}</span>')
        body.append(f'<div style="margin:6px 0"><b>{html.escape(label)}</b> {"".join(spans)}</div>')
    return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            f"<title>{html.escape(title)}</title></head>\n"
            "<body style=\"font-family:monospace\">\n" + "\n".join(body) + "\n</body></html>\n")
