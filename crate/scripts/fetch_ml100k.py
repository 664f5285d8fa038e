#!/usr/bin/env python3
"""Rebuild MovieLens-100k `u.data` / `u.item` from the copy bundled in the
RecBole wheel (useful where grouplens.org is unreachable but a PyPI mirror is).

usage: python3 scripts/fetch_ml100k.py [out_dir]   (default: data/ml-100k)
"""
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def main() -> None:
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join("data", "ml-100k")
    os.makedirs(out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
             "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "*.whl"))[0])
        prefix = "recbole/dataset_example/ml-100k/"
        inter = wheel.read(prefix + "ml-100k.inter").decode("utf-8").splitlines()
        items = wheel.read(prefix + "ml-100k.item").decode("latin-1").splitlines()

    with open(os.path.join(out, "u.data"), "w", encoding="utf-8") as f:
        for line in inter[1:]:
            if line.strip():
                user, item, rating, ts = line.split("\t")
                f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    with open(os.path.join(out, "u.item"), "w", encoding="latin-1") as f:
        for line in items[1:]:
            if not line.strip():
                continue
            item, title, year, classes = (line.split("\t") + ["", "", ""])[:4]
            label = f"{title} ({year})" if year.strip() else title
            present = set(classes.split())
            flags = "|".join("1" if g in present else "0" for g in GENRES)
            f.write(f"{item}|{label}|||{flags}\n")
    print(f"wrote {out}/u.data and {out}/u.item")


if __name__ == "__main__":
    main()
