#!/usr/bin/env python3
"""Fetch MovieLens-100K into data/ml-100k/.

The GroupLens archive is the canonical source. When it is unreachable the
copy bundled in the RecBole wheel on PyPI is used instead. Output:

  data/ml-100k/u.data       user<TAB>item<TAB>rating<TAB>timestamp (no header)
  data/ml-100k/genres.tsv   item<TAB>genre|genre|...
"""
import io
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def from_grouplens():
    url = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
    with urllib.request.urlopen(url, timeout=20) as resp:
        z = zipfile.ZipFile(io.BytesIO(resp.read()))
    data = z.read("ml-100k/u.data").decode()
    genres = []
    for line in z.read("ml-100k/u.item").decode("latin-1").splitlines():
        cols = line.split("|")
        flags = cols[-19:]
        names = [g for g, f in zip(GENRES, flags) if f == "1"]
        genres.append(f"{cols[0]}\t{'|'.join(names)}")
    return data, "\n".join(genres) + "\n"


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
             "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(f for f in os.listdir(tmp) if f.endswith(".whl"))
        z = zipfile.ZipFile(os.path.join(tmp, wheel))
        inter = z.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
        item = z.read("recbole/dataset_example/ml-100k/ml-100k.item").decode("latin-1")
    rows = []
    for line in inter.splitlines()[1:]:
        u, i, r, t = line.split("\t")
        rows.append(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}")
    genres = []
    for line in item.splitlines()[1:]:
        cols = line.split("\t")
        names = cols[3].split() if len(cols) > 3 else []
        genres.append(f"{cols[0]}\t{'|'.join(names)}")
    return "\n".join(rows) + "\n", "\n".join(genres) + "\n"


def main():
    root = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data", "ml-100k")
    os.makedirs(root, exist_ok=True)
    try:
        data, genres = from_grouplens()
        source = "grouplens"
    except Exception:
        data, genres = from_recbole()
        source = "recbole wheel"
    with open(os.path.join(root, "u.data"), "w") as f:
        f.write(data)
    with open(os.path.join(root, "genres.tsv"), "w") as f:
        f.write(genres)
    print(f"wrote {root} ({source}, {data.count(chr(10))} interactions)")


if __name__ == "__main__":
    main()
