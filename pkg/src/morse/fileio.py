"""On-disk artifacts: PGM label masks, metrics CSV, dataset manifests, checkpoints."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .autograd import mten
from .metrics import MetricsReport

METRICS_HEADER = ["sample", "class", "dsc", "jaccard", "hd95", "asd"]


class PGMError(ValueError):
    pass


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise ValueError("mask values must fit in 0..255")
    H, W = mask.shape
    payload = f"P5\n{W} {H}\n255\n".encode("ascii") + mask.astype(np.uint8).tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write mask {path}: {exc}") from exc


def _pgm_tokens(buf: bytes, source: str):
    """Yield (token, end_offset) for the 4 header fields, skipping comments."""
    pos = 0
    n = len(buf)
    for _ in range(4):
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{source}: truncated PGM header at offset {start}")
        yield buf[start:pos], start, pos


def parse_pgm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    tokens = list(_pgm_tokens(buf, source))
    magic, start, _ = tokens[0]
    if magic != b"P5":
        raise PGMError(f"{source}: expected P5 magic at offset {start}, found {magic[:8]!r}")
    values = []
    for tok, start, _ in tokens[1:]:
        if not tok.isdigit():
            raise PGMError(f"{source}: non-numeric header field {tok[:16]!r} at offset {start}")
        values.append(int(tok))
    W, H, maxval = values
    end = tokens[-1][2]
    if maxval < 1 or maxval > 255:
        raise PGMError(f"{source}: unsupported maxval {maxval} at offset {tokens[3][1]}")
    data_start = end + 1
    if len(buf) - data_start != W * H:
        raise PGMError(f"{source}: expected {W * H} pixel bytes at offset {data_start}, found {len(buf) - data_start}")
    return np.frombuffer(buf, dtype=np.uint8, offset=data_start).reshape(H, W).astype(np.int64)


def read_pgm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return parse_pgm(buf, str(path))


def write_metrics_csv(path, reports: dict[str, MetricsReport]) -> None:
    """Per-sample rows (each class plus ``mean``), then ``all`` rows averaged over samples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for sample, report in reports.items():
            for row in report.rows(sample):
                writer.writerow([row[0], row[1], *(f"{v:.6f}" for v in row[2:])])
        if reports:
            rows = np.array([[r[2:] for r in rep.rows("")] for rep in reports.values()], dtype=np.float64)
            first = next(iter(reports.values()))
            for cls, values in zip([*first.classes, "mean"], rows.mean(axis=0)):
                writer.writerow(["all", cls, *(f"{v:.6f}" for v in values)])


def write_manifest(path, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w") as fh:
        for image, label in pairs:
            fh.write(f"{image} {label}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image label', got {line!r}")
        pairs.append((parts[0], parts[1]))
    return pairs


def write_split(directory, images: np.ndarray, labels: np.ndarray) -> list[tuple[str, str]]:
    """Write ``images[n,1,H,W]`` as MTEN and ``labels[n,H,W]`` as PGM plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        image_name, label_name = f"img_{i:04d}.mten", f"lab_{i:04d}.pgm"
        mten.save(directory / image_name, np.ascontiguousarray(img, dtype=np.float32))
        write_pgm(directory / label_name, lab)
        pairs.append((image_name, label_name))
    write_manifest(directory / "manifest.txt", pairs)
    return pairs


def read_split(directory) -> tuple[np.ndarray, np.ndarray, list[str]]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"missing dataset manifest {manifest}")
    images, labels, names = [], [], []
    for image_name, label_name in read_manifest(manifest):
        images.append(mten.load(directory / image_name))
        labels.append(read_pgm(directory / label_name))
        names.append(Path(image_name).stem)
    return np.stack(images), np.stack(labels), names


def save_checkpoint(directory, state: dict[str, np.ndarray], config_text: str | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(state.items()):
        fname = f"p{i:03d}.mten"
        mten.save(directory / fname, arr)
        lines.append(f"{name} {fname}\n")
    (directory / "manifest.txt").write_text("".join(lines))
    if config_text is not None:
        (directory / "config.yaml").write_text(config_text)


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest}")
    state = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{manifest}:{lineno}: expected 'name file'")
        state[parts[0]] = mten.load(directory / parts[1])
    return state
