"""Converters from public rating dumps to the interaction CSV format."""
from __future__ import annotations

import csv
import os
from typing import IO

ML100K_GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def read_ml100k_ratings(path: str) -> list[tuple[str, str, float, int]]:
    """Ratings from GroupLens ``u.data`` (tab separated) or a RecBole ``.inter`` file."""
    rows = []
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 4 or not parts[0].strip().isdigit():
                continue
            rows.append((parts[0], parts[1], float(parts[2]), int(float(parts[3]))))
    return rows


def read_ml100k_genres(path: str) -> dict[str, str]:
    """First listed genre per movie from ``u.item`` (pipe separated flags) or a RecBole ``.item`` file."""
    out = {}
    with open(path, encoding="latin-1") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if "|" in line:
                parts = line.split("|")
                flags = parts[-19:]
                genres = [g for g, f in zip(ML100K_GENRES, flags) if f == "1"]
                out[parts[0]] = genres[0] if genres else "unknown"
            else:
                parts = line.split("\t")
                if len(parts) < 4 or not parts[0].isdigit():
                    continue
                genres = parts[3].split()
                out[parts[0]] = genres[0] if genres else "unknown"
    return out


def write_interactions(rows, out: IO[str], threshold: float = 4.0) -> int:
    """Binarize ratings (``rating >= threshold`` is a click) and write the interaction CSV."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["user_id", "item_id", "label", "timestamp"])
    positives = 0
    for user, item, rating, ts in rows:
        label = int(rating >= threshold)
        positives += label
        w.writerow([user, item, label, ts])
    return positives


def write_categories(genres: dict, out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["item_id", "category"])
    for item in sorted(genres, key=lambda s: (len(s), s)):
        w.writerow([item, genres[item]])


def convert_ml100k(ratings_path: str, items_path: str, out_dir: str) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    inter = os.path.join(out_dir, "interactions.csv")
    cats = os.path.join(out_dir, "categories.csv")
    with open(inter, "w", newline="") as fh:
        write_interactions(read_ml100k_ratings(ratings_path), fh)
    with open(cats, "w", newline="") as fh:
        write_categories(read_ml100k_genres(items_path), fh)
    return inter, cats
