"""Plain-file visual diagnostics: CSV matrices and 8-bit PGM images."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def cosine_similarity_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of the rows of ``x`` (zero rows map to 0)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    return sim


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix))
    lines = [",".join(repr(float(v)) for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(path, matrix: np.ndarray) -> None:
    """Binary (P5) PGM with min-max scaling to 0..255; constant input maps to 0."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lo = matrix.min()
    hi = matrix.max()
    if hi > lo:
        scaled = np.round((matrix - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(matrix)
    pixels = scaled.astype(np.uint8)
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


def export_matrix(out_dir, name: str, matrix: np.ndarray) -> list[str]:
    """Write both representations; returns the created file names."""
    out_dir = Path(out_dir)
    write_matrix_csv(out_dir / f"{name}.csv", matrix)
    write_pgm(out_dir / f"{name}.pgm", matrix)
    return [f"{name}.csv", f"{name}.pgm"]
