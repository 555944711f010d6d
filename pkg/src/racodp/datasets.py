"""Benchmark registry, download with checksum verification, and converters."""

from __future__ import annotations

import gzip
import hashlib
import io
import logging
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

ADULT_COLUMNS = [
    ("age", "numeric"),
    ("workclass", "categorical"),
    ("fnlwgt", "numeric"),
    ("education", "categorical"),
    ("education-num", "numeric"),
    ("marital-status", "categorical"),
    ("occupation", "categorical"),
    ("relationship", "categorical"),
    ("race", "categorical"),
    ("sex", "categorical"),
    ("capital-gain", "numeric"),
    ("capital-loss", "numeric"),
    ("hours-per-week", "numeric"),
    ("native-country", "categorical"),
    ("income", "label"),
]
ADULT_SCHEMA = dict(ADULT_COLUMNS)


@dataclass
class Benchmark:
    name: str
    files: dict  # file name -> (url, sha256 or None)
    schema: dict = field(default_factory=dict)
    sensitive: str | None = None
    output: str = ""
    note: str = ""


UCI = "https://archive.ics.uci.edu/ml/machine-learning-databases"

BENCHMARKS = {
    "adult": Benchmark(
        "adult",
        {
            "adult.data": (f"{UCI}/adult/adult.data",
                           "5b00264637dbfec36bdeaab5676b0b309ff9eb788d63554ca0a249491c86603d"),
            "adult.test": (f"{UCI}/adult/adult.test",
                           "a2a9044bc167a35b2361efbabec64e89d69ce82d9790d2980119aac5fd7e9c05"),
        },
        ADULT_SCHEMA,
        "sex",
        "adult.csv.gz",
    ),
    "credit-card": Benchmark(
        "credit-card",
        {"german.data": (f"{UCI}/statlog/german/german.data", None)},
        note="raw download only; no converter yet",
    ),
    "parkinsons": Benchmark(
        "parkinsons",
        {"parkinsons_updrs.data": (f"{UCI}/parkinsons/telemonitoring/parkinsons_updrs.data", None)},
        note="raw download only; no converter yet",
    ),
    "heart": Benchmark(
        "heart",
        {"heart_disease_health_indicators_BRFSS2015.csv": (
            "https://www.kaggle.com/datasets/alexteboul/heart-disease-health-indicators-dataset", None)},
        note="Kaggle requires an authenticated download; place the file manually",
    ),
}


class ChecksumError(IOError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verify(path: Path, expected: str | None):
    digest = sha256(path)
    if expected is None:
        logger.warning("no pinned checksum for %s; sha256=%s", path.name, digest)
    elif digest != expected:
        raise ChecksumError(f"{path.name}: sha256 {digest} != expected {expected}")
    return digest


def convert_adult(raw_dir, out_path) -> Path:
    """Merge ``adult.data`` and ``adult.test`` into one headed gzip CSV.

    Whitespace is stripped, blank lines and the test-file banner are skipped,
    and the trailing period on test labels is removed.
    """
    raw_dir, out_path = Path(raw_dir), Path(out_path)
    lines = [",".join(name for name, _ in ADULT_COLUMNS)]
    for fname in ("adult.data", "adult.test"):
        for raw in (raw_dir / fname).read_text().splitlines():
            raw = raw.strip()
            if not raw or raw.startswith("|"):
                continue
            cells = [c.strip() for c in raw.split(",")]
            cells[-1] = cells[-1].rstrip(".")
            lines.append(",".join(cells))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with gzip.open(out_path, "wt", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_path


CONVERTERS = {"adult": convert_adult}


def fetch(name: str, out_dir, raw_dir=None, timeout: float = 60.0) -> dict:
    """Download (or reuse ``raw_dir``), verify checksums and convert.

    Returns ``{"files": {name: sha256}, "output": path or None}``.
    """
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    bench = BENCHMARKS[name]
    out_dir = Path(out_dir)
    src = Path(raw_dir) if raw_dir else out_dir / "raw" / name
    src.mkdir(parents=True, exist_ok=True)
    digests = {}
    for fname, (url, expected) in bench.files.items():
        target = src / fname
        if not target.exists():
            logger.info("downloading %s", url)
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                target.write_bytes(resp.read())
        digests[fname] = _verify(target, expected)
    output = None
    if name in CONVERTERS:
        output = str(CONVERTERS[name](src, out_dir / bench.output))
    return {"files": digests, "output": output}


def open_text(path):
    """Text handle that transparently decompresses ``.gz`` files."""
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"))
    return open(path)
