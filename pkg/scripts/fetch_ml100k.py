"""Materialize MovieLens-100K raw files (``u.data``, ``u.item``) under a directory.

The GroupLens download host is not always reachable, but the RecBole wheel on
PyPI ships the full ML-100K ratings and genre table in its own "atomic" format.
This script downloads that wheel with pip and rewrites the two files in the
original ML-100K layout (tab-separated ratings, pipe-separated items with 19
genre flags), which is all :func:`divrec.data.parse_movielens` reads.

Usage::

    python scripts/fetch_ml100k.py data/ml-100k
"""

from __future__ import annotations

import argparse
import csv
import io
import pathlib
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
WHEEL = "recbole==1.2.1"
PREFIX = "recbole/dataset_example/ml-100k/"


def _download_wheel(dest: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", str(dest), WHEEL],
        check=True,
    )
    return next(dest.glob("recbole-*.whl"))


def convert(wheel: pathlib.Path, out: pathlib.Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf:
        inter = zf.read(PREFIX + "ml-100k.inter").decode("utf-8")
        items = zf.read(PREFIX + "ml-100k.item").decode("utf-8")

    rows = list(csv.reader(io.StringIO(inter), delimiter="\t"))[1:]
    with open(out / "u.data", "w", encoding="latin-1", newline="") as fh:
        for user, item, rating, ts in rows:
            fh.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    lines = []
    for row in list(csv.reader(io.StringIO(items), delimiter="\t"))[1:]:
        item_id, title, year, classes = row
        flags = ["0"] * len(GENRES)
        for name in classes.split():
            flags[GENRES.index(name)] = "1"
        date = f"01-Jan-{year}" if year else ""
        lines.append("|".join([item_id, title, date, "", ""] + flags))
    with open(out / "u.item", "w", encoding="latin-1", errors="replace", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} ratings and {len(lines)} items to {out}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=pathlib.Path, nargs="?", default=pathlib.Path("data/ml-100k"))
    parser.add_argument("--wheel", type=pathlib.Path, help="use an already downloaded wheel")
    args = parser.parse_args()
    if args.wheel:
        convert(args.wheel, args.out)
        return
    with tempfile.TemporaryDirectory() as tmp:
        convert(_download_wheel(pathlib.Path(tmp)), args.out)


if __name__ == "__main__":
    main()
