"""Text-prior providers and the ``fslab-emb v1`` embedding file format.

File layout: a header line ``fslab-emb v1 D=<dim>`` followed by CSV rows
``class_id,template_id,v0,...,v{D-1}`` with 17 significant digits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from fslab.data import DataError

_HEADER = re.compile(r"^fslab-emb v1 D=(\d+)$")


class EmbeddingFileError(DataError):
    pass


def write_embeddings(path, rows, dim):
    """``rows``: iterable of ``(class_id, template_id, vector)``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"fslab-emb v1 D={dim}\n")
        for cid, tid, vec in rows:
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise EmbeddingFileError(f"row ({cid}, {tid}) has width {vec.shape}, expected {dim}")
            fh.write(f"{int(cid)},{int(tid)}," + ",".join(format(v, ".17g") for v in vec) + "\n")


def read_embeddings(path):
    """Returns ``(dim, {class_id: array (M, dim)})`` with templates in file order."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise EmbeddingFileError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise EmbeddingFileError(f"{path}: empty embedding file")
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise EmbeddingFileError(f"{path}: bad header {lines[0]!r}")
    dim = int(m.group(1))
    per_class = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise EmbeddingFileError(f"{path}:{n}: expected {dim + 2} fields, got {len(parts)}")
        try:
            cid, tid = int(parts[0]), int(parts[1])
            vec = np.array([float(p) for p in parts[2:]])
        except ValueError as exc:
            raise EmbeddingFileError(f"{path}:{n}: {exc}") from exc
        per_class.setdefault(cid, []).append((tid, vec))
    return dim, {c: np.stack([v for _, v in sorted(rows, key=lambda r: r[0])]) for c, rows in per_class.items()}


@dataclass
class TextPriorProvider:
    """Per-class template embeddings standing in for ``f_txt(T_j)``."""

    mode: str = "none"  # file | heldout-proxy | none
    vectors: dict = field(default_factory=dict)
    dim: int | None = None

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def from_file(cls, path, class_ids=None, dim=None):
        fdim, vecs = read_embeddings(path)
        if dim is not None and fdim != dim:
            raise EmbeddingFileError(f"{path}: embedding width {fdim} does not match encoder output {dim}")
        if class_ids is not None:
            missing = [c for c in class_ids if c not in vecs]
            if missing:
                raise EmbeddingFileError(f"{path}: no prior rows for class(es) {', '.join(map(str, missing))}")
        return cls("file", vecs, fdim)

    @classmethod
    def heldout_proxy(cls, embeddings, labels):
        """Anchors from images disjoint from support and query, grouped by class."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels, dtype=int)
        vecs = {int(c): embeddings[labels == c] for c in np.unique(labels)}
        return cls("heldout-proxy", vecs, embeddings.shape[1] if embeddings.size else None)

    def templates(self, class_id):
        if self.mode == "none":
            raise DataError("text priors unavailable (provider mode 'none')")
        if class_id not in self.vectors or len(self.vectors[class_id]) == 0:
            raise DataError(f"text priors missing class {class_id}")
        return self.vectors[class_id]
