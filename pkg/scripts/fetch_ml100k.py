"""Extract MovieLens-100K from the recbole wheel and write it in the ingest formats.

Writes ``ratings.tsv`` (user, item, rating, timestamp), ``items.tsv`` (item, pipe-separated
genres) and ``users.tsv`` (user, age bucket, gender, occupation) into the output directory.
"""
import argparse
import glob
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

PREFIX = "recbole/dataset_example/ml-100k/"


def age_bucket(age: int) -> str:
    # ML-1M style buckets
    for edge in (18, 25, 35, 45, 50, 56):
        if age < edge:
            return str(edge)
    return "56+"


def convert(z: zipfile.ZipFile, out: Path) -> None:
    def lines(name):
        with z.open(PREFIX + name) as fh:
            text = io.TextIOWrapper(fh, encoding="utf-8")
            next(text)
            for line in text:
                yield line.rstrip("\n").split("\t")

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ratings.tsv", "w", encoding="utf-8") as fh:
        for u, i, r, t in lines("ml-100k.inter"):
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n")
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        for i, _title, _year, genres in lines("ml-100k.item"):
            fh.write(f"{i}\t{'|'.join(genres.split())}\n")
    with open(out / "users.tsv", "w", encoding="utf-8") as fh:
        for u, age, gender, occupation, _zip in lines("ml-100k.user"):
            fh.write(f"{u}\t{age_bucket(int(age))}\t{gender}\t{occupation}\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/ml-100k")
    parser.add_argument("--wheel", help="path to an already downloaded recbole wheel")
    args = parser.parse_args(argv)
    wheel = args.wheel
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp, "recbole==1.2.1"],
            check=True,
        )
        wheel = glob.glob(f"{tmp}/recbole-*.whl")[0]
    with zipfile.ZipFile(wheel) as z:
        convert(z, Path(args.out))
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
