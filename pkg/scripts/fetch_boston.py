"""Write data/boston.csv from the copy bundled in scikit-learn <= 1.1 wheels.

    python scripts/fetch_boston.py [--out data/boston.csv]

Only needs pip and a package index; scikit-learn itself is not installed.
The bundled file has a count line above the header, which is dropped.
"""
import argparse
import glob
import os
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "sklearn/datasets/data/boston_house_prices.csv"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "boston.csv"))
    p.add_argument("--version", default="1.1.3")
    args = p.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
                               "-q", "-d", tmp, f"scikit-learn=={args.version}"])
        wheel = glob.glob(os.path.join(tmp, "*.whl"))[0]
        raw = zipfile.ZipFile(wheel).read(MEMBER).decode()
    lines = raw.strip().splitlines()
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines[1:]) + "\n")
    print(f"wrote {len(lines) - 2} rows to {args.out}")


if __name__ == "__main__":
    main()
