"""Dataset manifest: one tab-separated line per image.

    image<TAB>labels<TAB>annotation<TAB>gt

``labels`` is a comma-separated list of class indices or ``-``; ``gt`` is an
evaluation-only mask path or ``-``. Relative paths resolve against the
manifest's directory. Blank lines and lines starting with ``#`` are skipped.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from weaksal.errors import EmptyDataset, MalformedFile


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    labels: tuple[int, ...] | None
    annotation: Path
    gt: Path | None = None
    active: bool = True

    @property
    def name(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def active(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.active]

    def with_annotation_dir(self, ann_dir) -> DatasetManifest:
        """Same entries with annotations redirected to <ann_dir>/<stem>.png."""
        ann_dir = Path(ann_dir)
        return DatasetManifest([replace(e, annotation=ann_dir / f"{e.name}.png") for e in self.entries], self.root)

    def deactivate(self, names) -> None:
        names = set(names)
        self.entries = [replace(e, active=False) if e.name in names else e for e in self.entries]

    def check_labels(self, n_classes: int) -> None:
        for e in self.entries:
            for c in e.labels or ():
                if not 0 <= c < n_classes:
                    raise MalformedFile(f"{e.image}: label {c} outside 0..{n_classes - 1}")

    def require_nonempty(self) -> None:
        if not self.active():
            raise EmptyDataset("manifest has no active entries")

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            labels = ",".join(str(c) for c in e.labels) if e.labels else "-"
            gt = _rel(e.gt, self.root) if e.gt is not None else "-"
            lines.append("\t".join([_rel(e.image, self.root), labels, _rel(e.annotation, self.root), gt]))
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        old_root, self.root = self.root, path.parent
        try:
            path.write_text(self.to_text())
        finally:
            self.root = old_root

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise MalformedFile(f"cannot read manifest {path}: {exc}") from exc
        return cls.parse(text, path.parent)

    @classmethod
    def parse(cls, text: str, root) -> DatasetManifest:
        root = Path(root)
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise MalformedFile(f"manifest line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
            image, labels, ann, gt = (f.strip() for f in fields)
            if not image or not ann:
                raise MalformedFile(f"manifest line {lineno}: empty image or annotation path")
            if labels == "-":
                label_set = None
            else:
                try:
                    label_set = tuple(sorted({int(x) for x in labels.split(",")}))
                except ValueError as exc:
                    raise MalformedFile(f"manifest line {lineno}: bad labels {labels!r}") from exc
            entries.append(ManifestEntry(
                image=root / image, labels=label_set, annotation=root / ann,
                gt=None if gt == "-" else root / gt))
        return cls(entries, root)


def _rel(path: Path, root: Path) -> str:
    """Path relative to the manifest directory, so a moved dataset tree still loads."""
    try:
        return os.path.relpath(Path(path).resolve(), Path(root).resolve())
    except ValueError:  # different drives
        return str(Path(path).resolve())
