#!/usr/bin/env python3
"""Download the public BL-TPIA feeder repository and import usable feeders.

Files that already parse as feeder JSON (top-level "nodes" and "lines") are
copied to crates/core/data/external/. Everything else is left under
crates/core/data/external/raw/ for manual conversion.

Usage: python3 scripts/fetch_external.py [--ref main]
"""

import argparse
import io
import json
import pathlib
import shutil
import zipfile

import requests

REPO = "https://github.com/pantheebikram/BL-TPIA"
ROOT = pathlib.Path(__file__).resolve().parent.parent
DEST = ROOT / "crates" / "core" / "data" / "external"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ref", default="main", help="branch or tag to download")
    args = ap.parse_args()

    url = f"{REPO}/archive/refs/heads/{args.ref}.zip"
    resp = requests.get(url, timeout=60)
    resp.raise_for_status()

    raw = DEST / "raw"
    if raw.exists():
        shutil.rmtree(raw)
    raw.mkdir(parents=True)
    zipfile.ZipFile(io.BytesIO(resp.content)).extractall(raw)

    imported = 0
    for path in sorted(raw.rglob("*.json")):
        try:
            doc = json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(doc, dict) and "nodes" in doc and "lines" in doc:
            shutil.copy(path, DEST / path.name)
            imported += 1
            print(f"imported {path.name}")
    print(f"{imported} feeder(s) imported; raw files in {raw}")
    if imported == 0:
        print("no file matched the feeder schema; convert the raw data before running the external checks")


if __name__ == "__main__":
    main()
