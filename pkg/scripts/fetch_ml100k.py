"""Fetch MovieLens-100K as a tsv4 ``u.data`` file.

Tries the GroupLens archive first. When that host is unreachable, falls back
to the copy bundled in the RecBole wheel (``ml-100k.inter``, same rows with a
typed header line), fetched through pip.

    python scripts/fetch_ml100k.py --out data/ml-100k/u.data
"""

import argparse
import glob
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens(timeout: float) -> bytes:
    with urllib.request.urlopen(GROUPLENS_URL, timeout=timeout) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def from_recbole_wheel() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "recbole==1.2.1"],
            check=True,
        )
        wheel = glob.glob(str(Path(tmp) / "recbole-*.whl"))[0]
        raw = zipfile.ZipFile(wheel).read(RECBOLE_MEMBER).decode()
    lines = raw.splitlines()
    # header: user_id:token  item_id:token  rating:float  timestamp:float
    body = [line for line in lines[1:] if line.strip()]
    return ("\n".join(body) + "\n").encode()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k/u.data")
    ap.add_argument("--timeout", type=float, default=10.0)
    args = ap.parse_args(argv)

    out = Path(args.out)
    if out.exists():
        print(f"{out} already present")
        return 0
    try:
        payload = from_grouplens(args.timeout)
        source = "grouplens"
    except Exception as exc:  # network policy varies by host
        print(f"grouplens unavailable ({exc}); using recbole wheel copy")
        payload = from_recbole_wheel()
        source = "recbole"
    n_lines = payload.count(b"\n")
    if n_lines != 100_000:
        raise SystemExit(f"unexpected row count {n_lines} from {source}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(payload)
    print(f"wrote {out} ({n_lines} ratings, source={source})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
