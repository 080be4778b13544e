"""Manifest builders matching the Fitzpatrick17k and DDI count tables."""

import csv


FITZ_COUNTS = {
    "benign": [444, 671, 475, 367, 159, 44],
    "malignant": [453, 742, 456, 301, 147, 61],
    "non-neoplastic": [2050, 3395, 2377, 2113, 1227, 530],
}
FITZ_UNKNOWN = 16577 - 16012

DDI_COUNTS = {
    "malignant": {"12": 49, "34": 74, "56": 48},
    "non-malignant": {"12": 159, "34": 167, "56": 159},
}


def fitzpatrick_rows(with_unknown=True):
    rows = []
    for cond, counts in FITZ_COUNTS.items():
        for t, n in enumerate(counts, start=1):
            for _ in range(n):
                rows.append((cond, str(t)))
    if with_unknown:
        conds = list(FITZ_COUNTS)
        rows += [(conds[i % 3], "-1") for i in range(FITZ_UNKNOWN)]
    return [{"id": f"fz{i:05d}", "image_path": f"img/fz{i:05d}.jpg", "condition": c, "fitzpatrick": f,
             "source": "Derm" if i % 2 else "Atla"} for i, (c, f) in enumerate(rows)]


def ddi_rows():
    rows = []
    for cond, by_group in DDI_COUNTS.items():
        for g, n in by_group.items():
            rows += [(cond, g)] * n
    return [{"id": f"ddi{i:04d}", "image_path": f"img/ddi{i:04d}.png", "condition": c, "fitzpatrick": g,
             "source": "DDI"} for i, (c, g) in enumerate(rows)]


def random_rows(rng, n, n_conditions=3, n_types=6, unknown_rate=0.0):
    conds = [f"cond{k}" for k in range(n_conditions)]
    rows = []
    for i in range(n):
        fitz = -1 if rng.random() < unknown_rate else int(rng.integers(1, n_types + 1))
        rows.append({"id": f"r{i}", "image_path": f"r{i}.png", "condition": conds[int(rng.integers(n_conditions))],
                     "fitzpatrick": str(fitz), "source": "Synth"})
    return rows


def write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "image_path", "condition", "fitzpatrick", "source"])
        w.writeheader()
        w.writerows(rows)
    return path
