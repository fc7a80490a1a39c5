"""Dataset manifest: the train/val/test partition consumed by every stage.

The on-disk form is a JSON array of entry objects with exactly these fields:
``image_path``, ``label`` ("normal" | "defective"), ``split``
("train" | "val" | "test") and optional ``gt_mask_path``.

Invariants enforced on load and save: the train split holds only normal
images, and every defective entry in val/test carries a ground-truth mask
path.
"""

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ManifestError

__all__ = ["ManifestEntry", "DatasetManifest"]

LABELS = ("normal", "defective")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    label: str
    split: str
    gt_mask_path: str | None = None


@dataclass
class DatasetManifest:
    entries: list

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for e in self.entries:
            if e.label not in LABELS:
                raise ManifestError(f"bad label {e.label!r} for {e.image_path}")
            if e.split not in SPLITS:
                raise ManifestError(f"bad split {e.split!r} for {e.image_path}")
            if e.split == "train" and e.label != "normal":
                raise ManifestError(f"train entry {e.image_path} is not normal")
            if e.label == "defective" and e.split in ("val", "test") and not e.gt_mask_path:
                raise ManifestError(f"defective entry {e.image_path} lacks a ground-truth mask")

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, base_dir) -> "DatasetManifest":
        """Return a copy with all paths made absolute against base_dir."""
        base = Path(base_dir)

        def fix(p):
            return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

        return DatasetManifest(
            [
                ManifestEntry(fix(e.image_path), e.label, e.split, fix(e.gt_mask_path))
                for e in self.entries
            ]
        )

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(raw, list):
            raise ManifestError(f"{path}: manifest must be a JSON array")
        entries = []
        for obj in raw:
            try:
                entries.append(
                    ManifestEntry(
                        image_path=obj["image_path"],
                        label=obj["label"],
                        split=obj["split"],
                        gt_mask_path=obj.get("gt_mask_path"),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"{path}: malformed entry {obj!r}") from exc
        return DatasetManifest(entries)

    def save(self, path) -> None:
        self.validate()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        for e in self.entries:
            row = {"image_path": e.image_path, "label": e.label, "split": e.split}
            if e.gt_mask_path is not None:
                row["gt_mask_path"] = e.gt_mask_path
            rows.append(row)
        path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
