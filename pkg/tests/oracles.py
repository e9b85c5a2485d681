"""Independent brute-force oracles used by the test suite.

Everything here is deliberately naive and structurally different from the
library implementations: explicit pair enumeration, full DP tables,
materialized TF-IDF vectors, BFS connected components, numpy gate
arithmetic. Slow is fine; these only run on desk-scale instances.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------------------
# caption metrics


def _all_ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def ref_bleu(candidates, references, n_max=4):
    """Corpus BLEU by greedy per-occurrence matching of candidate n-grams."""
    refsets = [[list(r)] if r and isinstance(r[0], str) else [list(x) for x in r] for r in references]
    matched = [0] * n_max
    total = [0] * n_max
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, refsets):
        cand_len += len(cand)
        best = None
        for r in refs:
            key = (abs(len(r) - len(cand)), len(r))
            if best is None or key < best:
                best = key
        ref_len += best[1]
        for n in range(1, n_max + 1):
            grams = _all_ngrams(cand, n)
            total[n - 1] += len(grams)
            # consume reference occurrences one by one (max over refs per gram)
            budget = {}
            for r in refs:
                counts = {}
                for g in _all_ngrams(r, n):
                    counts[g] = counts.get(g, 0) + 1
                for g, c in counts.items():
                    budget[g] = max(budget.get(g, 0), c)
            for g in grams:
                if budget.get(g, 0) > 0:
                    budget[g] -= 1
                    matched[n - 1] += 1
    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    out = []
    for n in range(1, n_max + 1):
        prod = 1.0
        ok = True
        for k in range(n):
            if total[k] == 0 or matched[k] == 0:
                ok = False
                break
            prod *= matched[k] / total[k]
        out.append(bp * prod ** (1.0 / n) if ok else 0.0)
    return out


def ref_lcs_table(a, b):
    """Full (len(a)+1) x (len(b)+1) DP table; returns the LCS length."""
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i, j] = table[i - 1, j - 1] + 1
            else:
                table[i, j] = max(table[i - 1, j], table[i, j - 1])
    return int(table[len(a), len(b)])


def ref_rouge_l(candidates, references, beta=1.2):
    refsets = [[list(r)] if r and isinstance(r[0], str) else [list(x) for x in r] for r in references]
    scores = []
    for cand, refs in zip(candidates, refsets):
        if not cand and all(not r for r in refs):
            continue
        precs = [ref_lcs_table(cand, r) / len(cand) for r in refs if cand]
        recs = [ref_lcs_table(cand, r) / len(r) for r in refs if r]
        p = max(precs) if precs else 0.0
        r = max(recs) if recs else 0.0
        if p > 0 and r > 0:
            scores.append((1 + beta**2) * p * r / (r + beta**2 * p))
        else:
            scores.append(0.0)
    return float(np.mean(scores)) if scores else 0.0


def ref_cider(candidates, references, n_max=4, sigma=6.0):
    """CIDEr-D with fully materialized TF-IDF vectors over a global index."""
    refsets = [[list(r)] if r and isinstance(r[0], str) else [list(x) for x in r] for r in references]
    n_pairs = len(refsets)

    universe = {}
    for refs in refsets:
        for r in refs:
            for n in range(1, n_max + 1):
                for g in _all_ngrams(r, n):
                    universe.setdefault(g, len(universe))
    for cand in candidates:
        for n in range(1, n_max + 1):
            for g in _all_ngrams(cand, n):
                universe.setdefault(g, len(universe))

    df = np.zeros(len(universe))
    for refs in refsets:
        seen = set()
        for r in refs:
            for n in range(1, n_max + 1):
                seen.update(_all_ngrams(r, n))
        for g in seen:
            df[universe[g]] += 1

    idf = np.log(float(n_pairs)) - np.log(np.maximum(1.0, df))

    def vec(tokens, n):
        v = np.zeros(len(universe))
        for g in _all_ngrams(tokens, n):
            v[universe[g]] += 1.0
        return v * idf

    total = 0.0
    for cand, refs in zip(candidates, refsets):
        pair = 0.0
        for r in refs:
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma**2))
            for n in range(1, n_max + 1):
                vc = vec(cand, n)
                vr = vec(r, n)
                nc = np.linalg.norm(vc)
                nr = np.linalg.norm(vr)
                if nc > 0 and nr > 0:
                    pair += penalty * float(np.minimum(vc, vr) @ vr) / (nc * nr)
        total += 10.0 * pair / (n_max * len(refs))
    return total / n_pairs


# ---------------------------------------------------------------------------
# classification


def ref_auroc(scores, labels):
    """Pairwise P(score_pos > score_neg) + 0.5 P(tie) by explicit enumeration."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ref_bce(probabilities, labels, eps=1e-7):
    """Elementwise binary cross-entropy sum, term by term."""
    total = 0.0
    for g, y in zip(probabilities, labels):
        g = min(max(float(g), eps), 1.0 - eps)
        total -= y * math.log(g) + (1 - y) * math.log(1.0 - g)
    return total


# ---------------------------------------------------------------------------
# heatmaps and boxes


def ref_bbox(heatmap, fraction=0.9, mode="largest"):
    """Threshold scan + BFS 4-connected components + tight box.

    Returns (row_min, col_min, row_max, col_max) or None for an all-zero map.
    Largest component by pixel count; ties prefer the component holding the
    global max, then the first in row-major order.
    """
    h = np.asarray(heatmap, dtype=float)
    peak = h.max()
    if peak <= 0:
        return None
    mask = h >= fraction * peak
    rows, cols = h.shape
    if mode == "union":
        idx = np.argwhere(mask)
        return (int(idx[:, 0].min()), int(idx[:, 1].min()), int(idx[:, 0].max()), int(idx[:, 1].max()))

    seen = np.zeros_like(mask, dtype=bool)
    argmax = np.unravel_index(int(np.argmax(h)), h.shape)
    components = []
    for i in range(rows):
        for j in range(cols):
            if mask[i, j] and not seen[i, j]:
                pixels = []
                queue = deque([(i, j)])
                seen[i, j] = True
                while queue:
                    r, c = queue.popleft()
                    pixels.append((r, c))
                    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < rows and 0 <= cc < cols and mask[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            queue.append((rr, cc))
                components.append(pixels)
    best = max(
        components,
        key=lambda px: (len(px), (argmax[0], argmax[1]) in set(map(tuple, px)), [-px[0][0], -px[0][1]]),
    )
    rs = [p[0] for p in best]
    cs = [p[1] for p in best]
    return (min(rs), min(cs), max(rs), max(cs))


# ---------------------------------------------------------------------------
# tiny network forward pass


def ref_conv2d(image, weight, bias, padding=1):
    """Direct 3x3-style convolution: (C_in, H, W) x (C_out, C_in, kh, kw)."""
    c_in, h, w = image.shape
    c_out, _, kh, kw = weight.shape
    padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    padded[:, padding : padding + h, padding : padding + w] = image
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = bias[o] + float(
                    (padded[:, i : i + kh, j : j + kw] * weight[o]).sum()
                )
    return out


def ref_maxpool2(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, i, j] = x[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(1, 2))
    return out


def ref_tiny_classifier_forward(image, params):
    """Forward pass of the tiny backbone + pooled linear head in pure numpy.

    params: dict of numpy arrays keyed like the torch state dict
    (net.0/net.3/net.6 convs, fc weight/bias).
    """
    x = ref_conv2d(image, params["backbone.net.0.weight"], params["backbone.net.0.bias"])
    x = np.maximum(x, 0.0)
    x = ref_maxpool2(x)
    x = ref_conv2d(x, params["backbone.net.3.weight"], params["backbone.net.3.bias"])
    x = np.maximum(x, 0.0)
    x = ref_maxpool2(x)
    x = ref_conv2d(x, params["backbone.net.6.weight"], params["backbone.net.6.bias"])
    x = np.maximum(x, 0.0)
    pooled = x.mean(axis=(1, 2))
    return params["fc.weight"] @ pooled + params["fc.bias"], x


# ---------------------------------------------------------------------------
# recurrent cells


def ref_lstm_step(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """One LSTMCell step in numpy, gates ordered input/forget/cell/output."""

    def sigmoid(v):
        return 1.0 / (1.0 + np.exp(-v))

    gates = w_ih @ x + b_ih + w_hh @ h + b_hh
    hs = gates.shape[0] // 4
    i = sigmoid(gates[:hs])
    f = sigmoid(gates[hs : 2 * hs])
    g = np.tanh(gates[2 * hs : 3 * hs])
    o = sigmoid(gates[3 * hs :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar f at flat numpy vector x by central differences."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up.flat[i] += eps
        dn.flat[i] -= eps
        grad.flat[i] = (f(up) - f(dn)) / (2 * eps)
    return grad
