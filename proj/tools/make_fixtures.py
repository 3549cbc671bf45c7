#!/usr/bin/env python3
"""Regenerates tests/fixtures.

Trains a small ReLU MLP on the scikit-learn digits set and writes it in the
.ronm format together with held-out data, labels and reference logits computed
by a plain per-sample loop. Also writes maxvol oracle fixtures whose optimal
volumes come from exhaustive subset enumeration.

Usage: python3 tools/make_fixtures.py [out_dir]
"""

import itertools
import json
import math
import sys
import zlib
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier

SEED = 20240611


class Blob:
    def __init__(self):
        self.data = bytearray()

    def add(self, array):
        a = np.ascontiguousarray(array, dtype="<f8")
        raw = a.tobytes()
        desc = {
            "shape": list(a.shape),
            "offset": len(self.data),
            "count": int(a.size),
            "crc32": "%08x" % (zlib.crc32(raw) & 0xFFFFFFFF),
        }
        self.data += raw
        return desc


def write_ronm(path, input_shape, layers):
    blob = Blob()
    out_layers = []
    for kind, payload in layers:
        if kind == "dense":
            w, b = payload
            out_layers.append({"type": "dense", "tensors": {"weight": blob.add(w), "bias": blob.add(b)}})
        elif kind == "relu":
            out_layers.append({"type": "activation", "activation": {"kind": "relu"}})
        else:
            raise ValueError(kind)
    manifest = {
        "format": "ronm",
        "version": 1,
        "kind": "teacher",
        "dtype": "float64",
        "byte_order": "little",
        "input_shape": list(input_shape),
        "layers": out_layers,
    }
    text = (json.dumps(manifest, indent=2) + "\n").encode()
    with open(path, "wb") as f:
        f.write(b"RONM1\n")
        f.write(str(len(text)).encode() + b"\n")
        f.write(text)
        f.write(bytes(blob.data))


def write_rond(path, matrix):
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    header = json.dumps({"rows": m.shape[0], "cols": m.shape[1], "dtype": "float64"}, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(b"ROND1\n")
        f.write(header.encode() + b"\n")
        f.write(m.tobytes())


def loop_forward(layers, x):
    """Sample-by-sample scalar loop, independent of any matrix library."""
    out = []
    for row in x:
        v = [float(t) for t in row]
        for kind, payload in layers:
            if kind == "dense":
                w, b = payload
                v = [sum(w[i][j] * v[j] for j in range(len(v))) + b[i] for i in range(len(b))]
            else:
                v = [t if t > 0.0 else 0.0 for t in v]
        out.append(v)
    return np.array(out)


def topk(logits, labels, k):
    hits = 0
    for row, y in zip(logits, labels):
        # Stable sort on descending value keeps lower class indices first on ties.
        order = sorted(range(len(row)), key=lambda c: -row[c])
        hits += y in order[:k]
    return hits / len(labels)


def det(m):
    a = [list(map(float, r)) for r in m]
    n = len(a)
    d = 1.0
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(a[r][c]))
        if a[p][c] == 0.0:
            return 0.0
        if p != c:
            a[c], a[p] = a[p], a[c]
            d = -d
        d *= a[c][c]
        for r in range(c + 1, n):
            f = a[r][c] / a[c][c]
            for k in range(c, n):
                a[r][k] -= f * a[c][k]
    return d


def volume(rows):
    cols = len(rows[0])
    gram = [[sum(r[i] * r[j] for r in rows) for j in range(cols)] for i in range(cols)]
    return max(0.0, det(gram))


def best_subset(a, p):
    best, arg = -1.0, None
    for sub in itertools.combinations(range(len(a)), p):
        v = volume([a[i] for i in sub])
        if v > best:
            best, arg = v, sub
    return list(arg), best


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests" / "fixtures")
    out.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    x = digits.data / 16.0
    y = digits.target
    x_train, x_test, y_train, y_test = train_test_split(x, y, test_size=360, random_state=SEED, stratify=y)

    clf = MLPClassifier(hidden_layer_sizes=(48, 32), activation="relu", max_iter=400, random_state=SEED)
    clf.fit(x_train, y_train)

    layers = []
    for i, (w, b) in enumerate(zip(clf.coefs_, clf.intercepts_)):
        layers.append(("dense", (w.T.copy(), b.copy())))
        if i + 1 < len(clf.coefs_):
            layers.append(("relu", None))
    write_ronm(out / "digits_mlp.ronm", (64, 1, 1), layers)

    calib = x_train[:600]
    write_rond(out / "digits_calib.rond", calib)
    write_rond(out / "digits_test.rond", x_test)
    write_rond(out / "digits_test_labels.rond", y_test.astype(np.float64))

    plain = [(k, (p[0].tolist(), p[1].tolist()) if k == "dense" else None) for k, p in layers]
    logits = loop_forward(plain, x_test)
    write_rond(out / "digits_test_logits.rond", logits)

    values = {
        "test_rows": int(x_test.shape[0]),
        "top1": topk(logits.tolist(), y_test.tolist(), 1),
        "top5": topk(logits.tolist(), y_test.tolist(), 5),
    }

    # Single 8x2 case for the command-line maxvol check.
    rng = np.random.default_rng(SEED)
    a = rng.standard_normal((8, 2))
    write_rond(out / "maxvol_8x2.rond", a)
    idx, vol = best_subset(a.tolist(), 3)
    values["maxvol_8x2"] = {"P": 3, "oracle_indices": idx, "oracle_volume": vol}

    cases = []
    for _ in range(50):
        d = int(rng.integers(3, 11))
        r = int(rng.integers(1, min(3, d - 1) + 1))
        p = min(d, math.ceil(1.5 * r))
        m = rng.standard_normal((d, r))
        sidx, svol = best_subset(m.tolist(), r)
        pidx, pvol = best_subset(m.tolist(), p)
        cases.append({
            "D": d, "R": r, "P": p,
            "matrix": m.ravel().tolist(),
            "square_optimum": svol, "square_indices": sidx,
            "rect_optimum": pvol, "rect_indices": pidx,
        })
    with open(out / "maxvol_cases.json", "w") as f:
        json.dump({"cases": cases}, f, indent=1)
        f.write("\n")

    with open(out / "fixture_values.json", "w") as f:
        json.dump(values, f, indent=2)
        f.write("\n")
    print(json.dumps(values, indent=2))


if __name__ == "__main__":
    main()
